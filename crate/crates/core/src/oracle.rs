//! Slow, independent reference computations used by the test suites.
//!
//! Each routine uses a different algorithm family from the production code
//! it checks: a fractional Adams-Bashforth-Moulton stepper for the mild
//! solver, Golub-Welsch Gauss rules with global node doubling for the
//! Gramian quadrature, proximal-gradient descent for the secular minimizer,
//! and power iteration for operator norms.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::function::gamma::{gamma, ln_gamma};
use thiserror::Error;

use crate::mittag::ml_unchecked;
use crate::model::{uniform_grid, SpectralModel, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("non-finite right-hand side at t = {0}")]
    NonFinite(f64),
    #[error("quadrature did not converge within the doubling budget (last change {0:.3e})")]
    Quadrature(f64),
    #[error("iteration cap reached (last step {0:.3e})")]
    IterationCap(f64),
    #[error("invalid input: {0}")]
    Input(String),
}

/// Fractional Adams-Bashforth-Moulton solution of
/// `ᶜD^q y = -Λ y + rhs(t, y)`, `y(0) = y_init`, on `steps` uniform steps.
pub fn adams_pece(
    model: &SpectralModel,
    rhs: &dyn Fn(f64, &DVector<f64>) -> DVector<f64>,
    y_init: &DVector<f64>,
    steps: usize,
) -> Result<Trajectory, OracleError> {
    if steps == 0 || y_init.len() != model.n_modes() {
        return Err(OracleError::Input("need at least one step and a full initial state".into()));
    }
    let q = model.q();
    let n_modes = model.n_modes();
    let grid = uniform_grid(model.b(), steps);
    let h = model.b() / steps as f64;
    let lambda = model.lambda();
    let field = |t: f64, y: &DVector<f64>| -> Result<DVector<f64>, OracleError> {
        let v = rhs(t, y) - lambda.component_mul(y);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(OracleError::NonFinite(t));
        }
        Ok(v)
    };

    let hq = h.powf(q);
    let pred_scale = hq / (q * gamma(q));
    let corr_scale = hq / gamma(q + 2.0);
    let powq: Vec<f64> = (0..=steps + 1).map(|k| (k as f64).powf(q)).collect();
    let powq1: Vec<f64> = (0..=steps + 1).map(|k| (k as f64).powf(q + 1.0)).collect();

    let mut values = DMatrix::zeros(n_modes, steps + 1);
    values.set_column(0, y_init);
    let mut history: Vec<DVector<f64>> = Vec::with_capacity(steps + 1);
    history.push(field(0.0, y_init)?);

    for n in 0..steps {
        let mut predictor = y_init.clone();
        let mut corrector = y_init.clone();
        for (j, fj) in history.iter().enumerate() {
            let b = powq[n + 1 - j] - powq[n - j];
            predictor.axpy(pred_scale * b, fj, 1.0);
            let a = if j == 0 {
                powq1[n] - (n as f64 - q) * powq[n + 1]
            } else {
                powq1[n - j + 2] + powq1[n - j] - 2.0 * powq1[n - j + 1]
            };
            corrector.axpy(corr_scale * a, fj, 1.0);
        }
        let t = grid[n + 1];
        corrector.axpy(corr_scale, &field(t, &predictor)?, 1.0);
        history.push(field(t, &corrector)?);
        values.set_column(n + 1, &corrector);
    }
    Trajectory::new(grid, values).map_err(|e| OracleError::Input(e.to_string()))
}

/// Gauss-Legendre rule from the eigen-decomposition of the Jacobi matrix.
pub fn golub_welsch(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) == 1 {
            let k = i.max(j) as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadEstimate {
    pub value: f64,
    pub error: f64,
    pub nodes: usize,
}

const GW_PANEL: usize = 128;

/// `∫_0^b (b-s)^{q-1} integrand(s) ds`, computed as
/// `(1/q) ∫_0^{b^q} integrand(b - σ^{1/q}) dσ` with Gauss rules of 4, 8, 16,
/// ... nodes (split into 128-node panels once the order exceeds 128) until
/// two successive values agree to `tol`.
pub fn refine_quadrature(integrand: &dyn Fn(f64) -> f64, b: f64, q: f64, tol: f64) -> Result<QuadEstimate, OracleError> {
    if !(b > 0.0 && q > 0.0 && q <= 1.0) {
        return Err(OracleError::Input(format!("need b > 0 and q in (0, 1], got b={b}, q={q}")));
    }
    let top = b.powf(q);
    let panel_rule = golub_welsch(GW_PANEL);
    let evaluate = |n: usize| -> f64 {
        let owned;
        let (nodes, weights, panels) = if n <= GW_PANEL {
            owned = golub_welsch(n);
            (&owned.0, &owned.1, 1)
        } else {
            (&panel_rule.0, &panel_rule.1, n / GW_PANEL)
        };
        let width = top / panels as f64;
        let mut sum = 0.0;
        for panel in 0..panels {
            let mid = width * (panel as f64 + 0.5);
            for (x, w) in nodes.iter().zip(weights) {
                let sigma = mid + 0.5 * width * x;
                sum += 0.5 * width * w * integrand(b - sigma.powf(1.0 / q));
            }
        }
        sum / q
    };
    let mut n = 4;
    let mut prev = evaluate(n);
    let mut change = f64::INFINITY;
    for _ in 0..12 {
        n *= 2;
        let next = evaluate(n);
        change = (next - prev).abs();
        prev = next;
        if change <= tol * prev.abs().max(1.0) {
            return Ok(QuadEstimate { value: prev, error: change, nodes: n });
        }
    }
    Err(OracleError::Quadrature(change))
}

/// Gramian entries one at a time through [`refine_quadrature`].
pub fn gramian_reference(model: &SpectralModel, tol: f64) -> Result<DMatrix<f64>, OracleError> {
    let q = model.q();
    let b = model.b();
    let pi = model.pi_indices();
    let p = pi.len();
    let mut out = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            let coupling: f64 = model.bmat().row(pi[j]).dot(&model.bmat().row(pi[k]));
            let (lj, lk) = (model.lambda()[pi[j]], model.lambda()[pi[k]]);
            let f = |s: f64| {
                let sq = (b - s).max(0.0).powf(q);
                ml_unchecked(q, q, -lj * sq) * ml_unchecked(q, q, -lk * sq)
            };
            let v = coupling * refine_quadrature(&f, b, q, tol)?.value;
            out[(j, k)] = v;
            out[(k, j)] = v;
        }
    }
    Ok(out)
}

/// Largest singular value of `a` by power iteration on `aᵀa`.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    let ata = a.transpose() * a;
    let n = ata.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64).normalize();
    let mut value = 0.0;
    for _ in 0..10_000 {
        let w = &ata * &v;
        let next = w.norm();
        if next == 0.0 {
            return 0.0;
        }
        v = w / next;
        if (next - value).abs() <= 1e-15 * next {
            value = next;
            break;
        }
        value = next;
    }
    value.sqrt()
}

/// Minimizes `½ φᵀΓφ + ε‖φ‖ - ⟨φ, h⟩` by forward-backward splitting: a
/// gradient step on the quadratic part followed by the block
/// soft-threshold that is the proximal map of `ε‖·‖`.
pub fn subgrad_minimize(gram: &DMatrix<f64>, h: &DVector<f64>, epsilon: f64) -> Result<DVector<f64>, OracleError> {
    if !(epsilon > 0.0) || gram.nrows() != h.len() || gram.ncols() != h.len() {
        return Err(OracleError::Input("need epsilon > 0 and matching dimensions".into()));
    }
    let lipschitz = spectral_norm(gram);
    if lipschitz == 0.0 {
        return Ok(DVector::zeros(h.len()));
    }
    let step = 1.0 / lipschitz;
    let mut phi = DVector::zeros(h.len());
    let mut last = f64::INFINITY;
    for _ in 0..1_000_000 {
        let forward = &phi - (gram * &phi - h) * step;
        let r = forward.norm();
        let next = if r <= step * epsilon { DVector::zeros(h.len()) } else { &forward * (1.0 - step * epsilon / r) };
        last = (&next - &phi).norm();
        phi = next;
        if last <= 1e-15 * (1.0 + phi.norm()) {
            return Ok(phi);
        }
    }
    Err(OracleError::IterationCap(last))
}

/// Power series `Σ x^k / Γ(αk + β)` with compensated summation. Returns the
/// value and a rounding-error bound proportional to `Σ |terms|`.
pub fn ml_series_reference(alpha: f64, beta: f64, x: f64) -> (f64, f64) {
    let mut sum = 0.0;
    let mut comp = 0.0;
    let mut abs_sum = 0.0;
    let lx = x.abs().ln();
    for k in 0..2000usize {
        let arg = alpha * k as f64 + beta;
        let term = if k == 0 {
            1.0 / gamma(beta)
        } else if x == 0.0 {
            0.0
        } else {
            let mag = (k as f64 * lx - ln_gamma(arg)).exp();
            if x < 0.0 && k % 2 == 1 {
                -mag
            } else {
                mag
            }
        };
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
        abs_sum += term.abs();
        if k > 4 && term.abs() <= 1e-20 * abs_sum {
            break;
        }
    }
    (sum + comp, 8.0 * f64::EPSILON * abs_sum)
}
