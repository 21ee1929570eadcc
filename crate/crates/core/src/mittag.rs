//! Scalar special functions behind the fractional solution operators.
//!
//! In eigencoordinates the resolvent families act diagonally: the
//! "state" operator multiplies mode `k` by `E_{q,1}(-λ_k t^q)` and the
//! "forcing" operator by `E_{q,q}(-λ_k t^q)`. Everything here works on
//! the non-positive real axis only.
//!
//! [`ml`] switches between three evaluation routes:
//!
//! * the power series, for `|x| <= 1` where it has no cancellation;
//! * the algebraic asymptotic expansion, when an a-priori envelope on its
//!   terms shows it has converged to double precision;
//! * numerical inversion of the Laplace transform `s^{α-β} / (s^α - x)`
//!   along an optimal parabolic contour for everything in between.

use std::f64::consts::{LN_10, PI};

use num_complex::Complex64;
use statrs::function::gamma::{gamma as lanczos_gamma, ln_gamma};
use thiserror::Error;

use crate::quadrature::integrate_adaptive;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DomainError {
    #[error("Mittag-Leffler alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
    #[error("Mittag-Leffler beta must be positive, got {0}")]
    Beta(f64),
    #[error("Mittag-Leffler argument must be finite and non-positive, got {0}")]
    Argument(f64),
    #[error("Wright density order must lie strictly inside (1/2, 1), got {0}")]
    WrightOrder(f64),
    #[error("Wright density argument must be positive and finite, got {0}")]
    WrightArgument(f64),
    #[error("gamma function argument must be positive and finite, got {0}")]
    GammaArgument(f64),
}

/// Parameters of the two-parameter Mittag-Leffler function `E_{α,β}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlParams {
    alpha: f64,
    beta: f64,
}

impl MlParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, DomainError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(DomainError::Alpha(alpha));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(DomainError::Beta(beta));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn eval(&self, x: f64) -> Result<f64, DomainError> {
        if !(x.is_finite() && x <= 0.0) {
            return Err(DomainError::Argument(x));
        }
        Ok(ml_unchecked(self.alpha, self.beta, x))
    }
}

/// Parameters of the Mainardi–Wright density `ω_q(θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WrightParams {
    q: f64,
    theta: f64,
}

impl WrightParams {
    pub fn new(q: f64, theta: f64) -> Result<Self, DomainError> {
        if !(q > 0.5 && q < 1.0) {
            return Err(DomainError::WrightOrder(q));
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(DomainError::WrightArgument(theta));
        }
        Ok(Self { q, theta })
    }

    pub fn density(&self) -> f64 {
        wright_density(self.q, self.theta)
    }
}

/// `E_{α,β}(x) = Σ_k x^k / Γ(αk + β)` for `α ∈ (0, 1]`, `β > 0`, `x <= 0`.
pub fn ml(alpha: f64, beta: f64, x: f64) -> Result<f64, DomainError> {
    MlParams::new(alpha, beta)?.eval(x)
}

/// Mainardi–Wright density `ω_q(θ)` for `q ∈ (1/2, 1)` and `θ > 0`.
pub fn wright_pdf(q: f64, theta: f64) -> Result<f64, DomainError> {
    Ok(WrightParams::new(q, theta)?.density())
}

/// `Γ(x)` for `x > 0`.
pub fn gamma_fn(x: f64) -> Result<f64, DomainError> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(DomainError::GammaArgument(x));
    }
    Ok(gamma_real(x))
}

/// Lanczos gamma, exact on small positive integers.
fn gamma_real(x: f64) -> f64 {
    if x > 0.0 && x <= 30.0 && x == x.floor() {
        return (2..x as u32).fold(1.0, |acc, k| acc * k as f64);
    }
    lanczos_gamma(x)
}

/// `1/Γ(x)` on the whole real line, zero at the poles.
pub(crate) fn rgamma(x: f64) -> f64 {
    if x <= 0.0 && x == x.floor() {
        return 0.0;
    }
    if x > 171.0 {
        return 0.0;
    }
    1.0 / gamma_real(x)
}

/// Unvalidated evaluation; callers guarantee the domain.
pub(crate) fn ml_unchecked(alpha: f64, beta: f64, x: f64) -> f64 {
    debug_assert!(alpha > 0.0 && alpha <= 1.0 && beta > 0.0 && x <= 0.0);
    if x == 0.0 {
        return rgamma(beta);
    }
    if alpha == 1.0 {
        if beta == 1.0 {
            return x.exp();
        }
        if beta == 2.0 {
            return x.exp_m1() / x;
        }
    }
    if x >= -SERIES_RADIUS {
        return ml_series(alpha, beta, x);
    }
    if alpha < 1.0 {
        if let Some(v) = ml_asymptotic(alpha, beta, x) {
            return v;
        }
    }
    ml_contour(alpha, beta, x)
}

const SERIES_RADIUS: f64 = 1.0;

/// Neumaier-compensated partial sums of the defining series.
fn ml_series(alpha: f64, beta: f64, x: f64) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    let mut power = 1.0_f64;
    let mut small_run = 0;
    for k in 0..400 {
        let term = power * rgamma(alpha * k as f64 + beta);
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
        if term.abs() <= 1e-18 * (sum + comp).abs() {
            small_run += 1;
            if small_run >= 2 {
                break;
            }
        } else {
            small_run = 0;
        }
        power *= x;
    }
    sum + comp
}

/// `-Σ_{k>=1} x^{-k} / Γ(β - αk)`, returned only when the envelope
/// `|x|^{-k} max|1/Γ(β-αk)|` of the next term is below double precision
/// relative to the partial sum.
fn ml_asymptotic(alpha: f64, beta: f64, x: f64) -> Option<f64> {
    let ax = x.abs();
    let ln_ax = ax.ln();
    let envelope = |k: usize| -> f64 {
        let z = beta - alpha * k as f64;
        let ln_bound = if z >= 1.0 {
            -ln_gamma(z)
        } else {
            ln_gamma(1.0 - z) - PI.ln()
        };
        (ln_bound - k as f64 * ln_ax).exp()
    };
    let mut sum = 0.0;
    let mut prev_env = f64::INFINITY;
    let mut inv_pow = 1.0;
    for k in 1..=200 {
        inv_pow /= x;
        sum -= inv_pow * rgamma(beta - alpha * k as f64);
        let next = envelope(k + 1);
        if sum != 0.0 && next <= 1e-16 * sum.abs() {
            return Some(sum);
        }
        if next > prev_env && k > 2 {
            return None;
        }
        prev_env = next;
    }
    None
}

const LN_EPS_MACHINE: f64 = -36.043_653_389_117_154;

/// Parabolic-contour inversion of `L[t^{β-1}E_{α,β}(x t^α)](s) =
/// s^{α-β}/(s^α - x)` at `t = 1`, with step size, node count and contour
/// scale chosen from the singularity structure. For real `x < 0` and
/// `α <= 1` the transform has no poles off the negative real axis, so only
/// the branch point at the origin constrains the contour.
fn ml_contour(alpha: f64, beta: f64, x: f64) -> f64 {
    let p = (-2.0 * (alpha - beta + 1.0)).max(0.0);
    let mut log_eps = 1e-15_f64.ln();
    let (mu, h, n) = loop {
        let (mu, h, n) = contour_parameters(p, log_eps);
        if n <= 200.0 {
            break (mu, h, n as usize);
        }
        log_eps += LN_10;
    };

    let lambda = Complex64::new(x, 0.0);
    let integrand = |u: f64| -> f64 {
        let w = Complex64::new(1.0, u);
        let z = mu * w * w;
        let dz = Complex64::new(-2.0 * mu * u, 2.0 * mu);
        let f = (z.ln() * (alpha - beta)).exp() / ((z.ln() * alpha).exp() - lambda);
        (z.exp() * f * dz).im
    };
    // The integrand at -u is minus the conjugate of the one at u, so the
    // trapezoidal sum collapses onto imaginary parts over u >= 0.
    let mut acc = integrand(0.0);
    for k in 1..=n {
        acc += 2.0 * integrand(h * k as f64);
    }
    h * acc / (2.0 * PI)
}

fn contour_parameters(p: f64, log_eps: f64) -> (f64, f64, f64) {
    let mut phibar = 0.01_f64;
    let mut sq_phibar = 0.1_f64;
    let mut n;
    let mut a;
    let mut sq_mu;
    let mut guard = 0;
    loop {
        let le = log_eps / phibar;
        n = (phibar / PI * (1.0 - 1.5 * le + (1.0 - 2.0 * le).sqrt())).ceil();
        a = PI * n / phibar;
        sq_mu = sq_phibar * (4.0 - a).abs() / (7.0 - (1.0 + 12.0 * a).sqrt()).abs();
        let fbar = (sq_phibar / sq_mu).powf(-p);
        guard += 1;
        if p < 1e-14 || (fbar > 1.0 && fbar < 10.0) || guard > 100 {
            break;
        }
        sq_phibar = 5.0_f64.powf(-1.0 / p) * sq_mu;
        phibar = sq_phibar * sq_phibar;
    }
    let mut mu = sq_mu * sq_mu;
    let mut h = (-3.0 * a - 2.0 + 2.0 * (1.0 + 12.0 * a).sqrt()) / (4.0 - a) / n;

    // Keep exp(mu) small enough that cancellation stays under the target.
    let threshold = log_eps - LN_EPS_MACHINE;
    if mu > threshold {
        let q = if p.abs() < 1e-14 {
            0.0
        } else {
            5.0_f64.powf(-1.0 / p) * mu.sqrt()
        };
        let phibar = q * q;
        if phibar < threshold {
            let w = (LN_EPS_MACHINE / (LN_EPS_MACHINE - log_eps)).sqrt();
            let u = (-phibar / LN_EPS_MACHINE).sqrt();
            mu = threshold;
            n = (w * log_eps / (2.0 * PI * (u * w - 1.0))).ceil();
            h = w / n;
        } else {
            n = f64::INFINITY;
            h = 0.0;
        }
    }
    (mu, h, n)
}

/// Evaluates `ω_q(θ) = (1/q) θ^{-1-1/q} ϖ_q(θ^{-1/q})` where `ϖ_q` is the
/// one-sided stable density series. Falls back to Zolotarev's integral
/// form when the alternating series would lose more than ~1e-12 to
/// cancellation or does not settle within 200 terms.
fn wright_density(q: f64, theta: f64) -> f64 {
    if let Some(v) = wright_series(q, theta) {
        return v;
    }
    wright_zolotarev(q, theta)
}

fn wright_series(q: f64, theta: f64) -> Option<f64> {
    let ln_theta = theta.ln();
    let ln_x = -ln_theta / q;
    let ln_prefactor = -q.ln() - PI.ln() + (-1.0 - 1.0 / q) * ln_theta;
    let mut sum = 0.0;
    let mut abs_sum = 0.0;
    let mut converged = false;
    for n in 1..=200_usize {
        let nf = n as f64;
        let s = (nf * PI * q).sin();
        let ln_mag = ln_prefactor - (nf * q + 1.0) * ln_x + ln_gamma(nf * q + 1.0) - ln_gamma(nf + 1.0);
        let mag = ln_mag.exp() * s.abs();
        let signed = if (n % 2 == 1) == (s >= 0.0) { mag } else { -mag };
        sum += signed;
        abs_sum += mag;
        if n >= 2 && ln_mag.exp() < 1e-16 {
            converged = true;
            break;
        }
    }
    if converged && abs_sum * f64::EPSILON * 16.0 <= 1e-12 {
        Some(sum.max(0.0))
    } else {
        None
    }
}

fn wright_zolotarev(q: f64, theta: f64) -> f64 {
    let r = 1.0 / (1.0 - q);
    let scale = theta.powf(r);
    let shape = |phi: f64| -> f64 {
        let ratio = (q * phi).sin() / phi.sin();
        ratio.powf(r) * ((1.0 - q) * phi).sin() / (q * phi).sin()
    };
    let integrand = |phi: f64| -> f64 {
        if phi <= 0.0 {
            return q.powf(r) * (1.0 - q) / q * (-scale * q.powf(r) * (1.0 - q) / q).exp();
        }
        let u = shape(phi);
        if !u.is_finite() {
            return 0.0;
        }
        let e = (-scale * u).exp();
        if e == 0.0 {
            0.0
        } else {
            u * e
        }
    };
    let integral = integrate_adaptive(integrand, 0.0, PI, 1e-300, 1e-13, 2000);
    theta.powf(q * r) / ((1.0 - q) * PI) * integral.value
}
