//! Gramian assembly, the data vector `h`, the penalized dual functional and
//! the resulting control law.
//!
//! All time integrals carry the weak singularity `(b-s)^{q-1}`; they are
//! computed in the variable `σ = (b-s)^q`, where `ds (b-s)^{q-1} = dσ/q` and
//! the remaining integrand is smooth.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::mittag::ml_unchecked;
use crate::model::{apply_s_classical, eval_g, ModelError, NonlinearitySpec, NonlocalSpec, SpectralModel, Trajectory};
use crate::quadrature::GaussLegendre;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VarminError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("epsilon must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("quadrature did not settle: successive refinements differ by {0:.3e}")]
    Quadrature(f64),
    #[error("no bracket for the secular equation: the Gramian is numerically singular along h (|h| = {h_norm:.6e}, epsilon = {epsilon:.6e})")]
    RootBracketing { h_norm: f64, epsilon: f64 },
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("time {s} lies outside [0, {b}]")]
    TimeOutOfRange { s: f64, b: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Smoothing index `n` of the factor `S(1/n)` applied to the nonlocal term;
/// `Infinite` drops the factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Smoothing {
    Finite(u32),
    Infinite,
}

impl Smoothing {
    /// Smoothing time `1/n`, or `None` for the identity.
    pub fn time(self) -> Option<f64> {
        match self {
            Smoothing::Finite(n) => Some(1.0 / n as f64),
            Smoothing::Infinite => None,
        }
    }
}

impl fmt::Display for Smoothing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Smoothing::Finite(n) => write!(f, "{n}"),
            Smoothing::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Smoothing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Smoothing::Infinite),
            other => match other.parse::<u32>() {
                Ok(n) if n > 0 => Ok(Smoothing::Finite(n)),
                _ => Err(format!("smoothing index must be a positive integer or \"inf\", got {other:?}")),
            },
        }
    }
}

impl Serialize for Smoothing {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Smoothing::Finite(n) => serializer.serialize_u32(*n),
            Smoothing::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Smoothing {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(n) if n > 0 && n <= u32::MAX as u64 => Ok(Smoothing::Finite(n as u32)),
            Raw::Int(n) => Err(serde::de::Error::custom(format!("smoothing index must be positive, got {n}"))),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gramian {
    pub mat: DMatrix<f64>,
    pub quad_nodes: usize,
}

impl Gramian {
    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        SymmetricEigen::new(self.mat.clone()).eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }
}

const PANEL_NODES: usize = 16;
const MAX_PANEL_DOUBLINGS: usize = 12;

/// `Γ_jk = (BBᵀ)_jk / q · ∫_0^{b^q} E_{q,q}(-λ_j σ) E_{q,q}(-λ_k σ) dσ` over
/// target modes, by composite Gauss-Legendre with panel doubling.
pub fn assemble_gramian(model: &SpectralModel) -> Result<Gramian, VarminError> {
    let q = model.q();
    let pi = model.pi_indices();
    let p = pi.len();
    let rows = model.target_control_rows();
    let coupling = &rows * rows.transpose();
    let lambda: Vec<f64> = pi.iter().map(|&i| model.lambda()[i]).collect();
    let top = model.b().powf(q);
    let rule = GaussLegendre::new(PANEL_NODES);

    let moments = |panels: usize| -> DMatrix<f64> {
        let mut m = DMatrix::zeros(p, p);
        let width = top / panels as f64;
        let mut e = DVector::zeros(p);
        for panel in 0..panels {
            let lo = width * panel as f64;
            for (sigma, w) in rule.mapped(lo, if panel + 1 == panels { top } else { lo + width }) {
                for j in 0..p {
                    e[j] = ml_unchecked(q, q, -lambda[j] * sigma);
                }
                m.syger(w, &e, &e, 1.0);
            }
        }
        m.fill_upper_triangle_with_lower_triangle();
        m
    };

    let finish = |m: DMatrix<f64>| -> DMatrix<f64> {
        let mut g = coupling.component_mul(&m) / q;
        g.fill_upper_triangle_with_lower_triangle();
        g
    };

    let mut panels = 4;
    let mut prev = finish(moments(panels));
    let mut diff = f64::INFINITY;
    for _ in 0..MAX_PANEL_DOUBLINGS {
        panels *= 2;
        let next = finish(moments(panels));
        diff = (&next - &prev).amax();
        prev = next;
        let scale = prev.amax().max(1.0);
        if diff <= 1e-13 * scale {
            break;
        }
    }
    if !prev.iter().all(|v| v.is_finite()) {
        return Err(VarminError::NonFinite("Gramian"));
    }
    if diff > 1e-6 {
        return Err(VarminError::Quadrature(diff));
    }
    Ok(Gramian { mat: prev, quad_nodes: panels * PANEL_NODES })
}

/// Quadrature weights for `∫_0^b (b-s)^{q-1} E_{q,q}(-λ_p (b-s)^q) f(s) ds`
/// when `f` is piecewise linear on a fixed time grid: the integral equals
/// `Σ_i weights[(p, i)] f(t_i)`.
#[derive(Debug, Clone)]
pub struct HnOperator {
    grid: Vec<f64>,
    weights: DMatrix<f64>,
    state_factor: DVector<f64>,
}

const HN_NODES: usize = 10;

impl HnOperator {
    pub fn new(model: &SpectralModel, grid: &[f64]) -> Result<Self, VarminError> {
        if grid.len() < 2 || grid[0] != 0.0 || grid[grid.len() - 1] != model.b() {
            return Err(ModelError::Trajectory(format!("grid must run from 0 to b = {}", model.b())).into());
        }
        let coarse = Self::weights(model, grid, HN_NODES);
        let fine = Self::weights(model, grid, 2 * HN_NODES);
        let diff = (&fine - &coarse).amax();
        if !(diff <= 1e-10 * fine.amax().max(1e-300) + 1e-14) {
            return Err(VarminError::Quadrature(diff));
        }
        let bq = model.b().powf(model.q());
        let state_factor = DVector::from_iterator(
            model.n_target(),
            model.pi_indices().iter().map(|&i| ml_unchecked(model.q(), 1.0, -model.lambda()[i] * bq)),
        );
        Ok(Self { grid: grid.to_vec(), weights: fine, state_factor })
    }

    fn weights(model: &SpectralModel, grid: &[f64], nodes: usize) -> DMatrix<f64> {
        let q = model.q();
        let b = model.b();
        let lambda: Vec<f64> = model.pi_indices().iter().map(|&i| model.lambda()[i]).collect();
        let rule = GaussLegendre::new(nodes);
        let mut w = DMatrix::zeros(lambda.len(), grid.len());
        let last = grid.len() - 1;
        // Last cell, with v = b - s: hat functions (1 - v/len) and v/len against
        // the kernel v^{q-1} E_{q,q}(-λ v^q) integrate exactly to Mittag-Leffler
        // values; σ-quadrature would see the non-smooth σ^{1/q} there.
        let len = b - grid[last - 1];
        let lq = len.powf(q);
        for (p, &l) in lambda.iter().enumerate() {
            let moment = lq * ml_unchecked(q, q + 1.0, -l * lq);
            let ramp = lq * ml_unchecked(q, q + 2.0, -l * lq);
            w[(p, last)] += ramp;
            w[(p, last - 1)] += moment - ramp;
        }
        for i in 0..last - 1 {
            let (t0, t1) = (grid[i], grid[i + 1]);
            let hi = (b - t0).powf(q);
            let lo = (b - t1).powf(q);
            for (sigma, weight) in rule.mapped(lo, hi) {
                let s = b - sigma.powf(1.0 / q);
                let theta = ((s - t0) / (t1 - t0)).clamp(0.0, 1.0);
                for (p, &l) in lambda.iter().enumerate() {
                    let k = weight / q * ml_unchecked(q, q, -l * sigma);
                    w[(p, i)] += k * (1.0 - theta);
                    w[(p, i + 1)] += k * theta;
                }
            }
        }
        w
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// `h = y_b - Π S_q(b)(y₀ - S(1/n) g(z)) - ∫_0^b (b-s)^{q-1} Π T_q(b-s) f(s, z(s)) ds`.
    pub fn eval(
        &self,
        model: &SpectralModel,
        gspec: &NonlocalSpec,
        fspec: &NonlinearitySpec,
        z: &Trajectory,
        smoothing: Smoothing,
    ) -> Result<DVector<f64>, VarminError> {
        if z.grid() != self.grid.as_slice() {
            return Err(ModelError::Trajectory("trajectory grid differs from the operator grid".into()).into());
        }
        if z.n_modes() != model.n_modes() {
            return Err(VarminError::Dimension { what: "trajectory modes", expected: model.n_modes(), got: z.n_modes() });
        }
        let start = initial_offset(model, gspec, z, smoothing)?;
        let pi = model.pi_indices();
        let mut h = model.yb().clone();
        for (p, &i) in pi.iter().enumerate() {
            h[p] -= self.state_factor[p] * start[i];
        }
        if !fspec.is_zero() {
            for (col, &t) in self.grid.iter().enumerate() {
                let f = fspec.eval(t, &z.state(col));
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(VarminError::NonFinite("nonlinearity"));
                }
                for (p, &i) in pi.iter().enumerate() {
                    h[p] -= self.weights[(p, col)] * f[i];
                }
            }
        }
        Ok(h)
    }
}

/// `y₀ - S(1/n) g(z)`.
pub fn initial_offset(
    model: &SpectralModel,
    gspec: &NonlocalSpec,
    z: &Trajectory,
    smoothing: Smoothing,
) -> Result<DVector<f64>, ModelError> {
    if gspec.is_empty() {
        return Ok(model.y0().clone());
    }
    let g = eval_g(gspec, z)?;
    let smoothed = match smoothing.time() {
        Some(tau) => apply_s_classical(model, tau, &g)?,
        None => g,
    };
    Ok(model.y0() - smoothed)
}

/// One-shot form of [`HnOperator::eval`] on the trajectory's own grid.
pub fn eval_hn(
    model: &SpectralModel,
    gspec: &NonlocalSpec,
    fspec: &NonlinearitySpec,
    z: &Trajectory,
    smoothing: Smoothing,
) -> Result<DVector<f64>, VarminError> {
    HnOperator::new(model, z.grid())?.eval(model, gspec, fspec, z, smoothing)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimizeReport {
    pub phi_hat: DVector<f64>,
    pub j_value: f64,
    pub residual: f64,
    pub zero_case: bool,
}

/// `J(φ) = ½ φᵀΓφ + ε‖φ‖ - ⟨φ, h⟩`.
pub fn j_value(gram: &Gramian, h: &DVector<f64>, epsilon: f64, phi: &DVector<f64>) -> f64 {
    0.5 * phi.dot(&(&gram.mat * phi)) + epsilon * phi.norm() - phi.dot(h)
}

/// Norm of `Γφ + εφ/‖φ‖ - h`; for `φ = 0` the distance of `h` from the ball
/// of radius `ε`.
pub fn optimality_residual(gram: &Gramian, h: &DVector<f64>, epsilon: f64, phi: &DVector<f64>) -> f64 {
    let rho = phi.norm();
    if rho == 0.0 {
        return (h.norm() - epsilon).max(0.0);
    }
    (&gram.mat * phi + phi * (epsilon / rho) - h).norm()
}

/// Minimizes `J` through the secular equation `‖(Γ + (ε/ρ)I)^{-1}h‖ = ρ`.
pub fn minimize_j(gram: &Gramian, h: &DVector<f64>, epsilon: f64) -> Result<MinimizeReport, VarminError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(VarminError::Epsilon(epsilon));
    }
    let p = gram.dim();
    if h.len() != p {
        return Err(VarminError::Dimension { what: "data vector", expected: p, got: h.len() });
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(VarminError::NonFinite("data vector"));
    }
    let h_norm = h.norm();
    if h_norm <= epsilon {
        return Ok(MinimizeReport { phi_hat: DVector::zeros(p), j_value: 0.0, residual: 0.0, zero_case: true });
    }

    let sym = (&gram.mat + gram.mat.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let c = eig.eigenvectors.transpose() * h;
    let c2: Vec<f64> = c.iter().map(|v| v * v).collect();
    let bracket_error = VarminError::RootBracketing { h_norm, epsilon };

    // ψ(ρ) = S(ρ)^{-1/2} - 1 with S(ρ) = Σ c_i² / (ρ d_i + ε)², increasing in ρ.
    let psi = |rho: f64| -> (f64, f64) {
        let mut s = 0.0;
        let mut ds = 0.0;
        for i in 0..p {
            let den = rho * d[i] + epsilon;
            s += c2[i] / (den * den);
            ds += c2[i] * d[i] / (den * den * den);
        }
        let inv = 1.0 / s.sqrt();
        (inv - 1.0, inv * inv * inv * ds)
    };

    let mut lo = 0.0;
    let mut hi = h_norm / d.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    loop {
        let (v, _) = psi(hi);
        if v > 0.0 {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() || !v.is_finite() {
            return Err(bracket_error);
        }
    }

    let mut rho = 0.5 * (lo + hi);
    for _ in 0..300 {
        let (v, dv) = psi(rho);
        if v == 0.0 {
            break;
        }
        if v < 0.0 {
            lo = rho;
        } else {
            hi = rho;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        let newton = rho - v / dv;
        rho = if newton > lo && newton < hi && dv > 0.0 { newton } else { 0.5 * (lo + hi) };
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(bracket_error);
    }

    let scaled = DVector::from_fn(p, |i, _| rho / (rho * d[i] + epsilon) * c[i]);
    let phi_hat = &eig.eigenvectors * scaled;
    let residual = optimality_residual(gram, h, epsilon, &phi_hat);
    Ok(MinimizeReport { j_value: j_value(gram, h, epsilon, &phi_hat), phi_hat, residual, zero_case: false })
}

/// `u(s) = Bᵀ Π* diag_p E_{q,q}(-λ_p (b-s)^q) φ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLaw {
    pub phi_hat: DVector<f64>,
    pub rho: f64,
    q: f64,
    b: f64,
    lambda: Vec<f64>,
    rows: DMatrix<f64>,
}

impl ControlLaw {
    pub fn new(model: &SpectralModel, phi_hat: DVector<f64>) -> Result<Self, VarminError> {
        if phi_hat.len() != model.n_target() {
            return Err(VarminError::Dimension { what: "minimizer", expected: model.n_target(), got: phi_hat.len() });
        }
        Ok(Self {
            rho: phi_hat.norm(),
            phi_hat,
            q: model.q(),
            b: model.b(),
            lambda: model.pi_indices().iter().map(|&i| model.lambda()[i]).collect(),
            rows: model.target_control_rows(),
        })
    }

    pub fn n_controls(&self) -> usize {
        self.rows.ncols()
    }

    /// Evaluates the control at `s ∈ [0, b]` without the range check.
    pub(crate) fn value_unchecked(&self, s: f64) -> DVector<f64> {
        if self.rho == 0.0 {
            return DVector::zeros(self.rows.ncols());
        }
        let sigma = (self.b - s).max(0.0).powf(self.q);
        let weighted = DVector::from_fn(self.lambda.len(), |p, _| ml_unchecked(self.q, self.q, -self.lambda[p] * sigma) * self.phi_hat[p]);
        self.rows.tr_mul(&weighted)
    }
}

pub fn control_value(law: &ControlLaw, s: f64) -> Result<DVector<f64>, VarminError> {
    if !(s >= 0.0 && s <= law.b) {
        return Err(VarminError::TimeOutOfRange { s, b: law.b });
    }
    Ok(law.value_unchecked(s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PacCheck {
    pub min_eig: f64,
    pub rank_tol: f64,
    pub controllable: bool,
}

/// Linear partial-approximate controllability of the truncation: `Γ` positive
/// definite relative to `1e-10 · trace(Γ)/P`.
pub fn check_linear_pac(gram: &Gramian) -> PacCheck {
    let p = gram.dim().max(1);
    let rank_tol = 1e-10 * gram.mat.trace() / p as f64;
    let min_eig = gram.min_eigenvalue();
    PacCheck { min_eig, rank_tol, controllable: min_eig > rank_tol }
}
