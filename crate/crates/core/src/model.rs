//! Truncated spectral representation of the control problem.
//!
//! The state lives in the coordinates of `N` eigenvectors of the generator,
//! which is represented only by its eigenvalues `-λ_k` (`λ_k >= 0`). The
//! target subspace is spanned by a subset of those eigenvectors, so the
//! projection is coordinate selection and its adjoint is zero padding.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::mittag::ml_unchecked;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("fractional order q must lie in (1/2, 1], got {0}")]
    Order(f64),
    #[error("horizon b must be positive and finite, got {0}")]
    Horizon(f64),
    #[error("model needs at least one mode and one control, got N={modes}, M={controls}")]
    Empty { modes: usize, controls: usize },
    #[error("eigenvalue lambda_{index} = {value} must be finite and non-negative")]
    Eigenvalue { index: usize, value: f64 },
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("projection index set is invalid: {0}")]
    Projection(String),
    #[error("time {t} lies outside [0, {b}]")]
    TimeOutOfRange { t: f64, b: f64 },
    #[error("smoothing time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("nonlocal cutoff delta must lie in (0, b) = (0, {b}), got {delta}")]
    Delta { delta: f64, b: f64 },
    #[error("nonlocal point t = {t} lies before the cutoff delta = {delta}")]
    PointBeforeDelta { t: f64, delta: f64 },
    #[error("nonlocal point t = {t} lies beyond the horizon {b}")]
    PointAfterHorizon { t: f64, b: f64 },
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// The truncated problem: order, horizon, spectrum, control operator,
/// projection and data.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralModel {
    q: f64,
    b: f64,
    lambda: DVector<f64>,
    bmat: DMatrix<f64>,
    pi_set: Vec<usize>,
    y0: DVector<f64>,
    yb: DVector<f64>,
}

impl SpectralModel {
    /// `pi_set` holds 1-based mode indices in strictly increasing order.
    pub fn new(
        q: f64,
        b: f64,
        lambda: DVector<f64>,
        bmat: DMatrix<f64>,
        pi_set: &[usize],
        y0: DVector<f64>,
        yb: DVector<f64>,
    ) -> Result<Self, ModelError> {
        if !(q > 0.5 && q <= 1.0) {
            return Err(ModelError::Order(q));
        }
        if !(b > 0.0 && b.is_finite()) {
            return Err(ModelError::Horizon(b));
        }
        let n = lambda.len();
        if n == 0 || bmat.ncols() == 0 {
            return Err(ModelError::Empty { modes: n, controls: bmat.ncols() });
        }
        for (index, &value) in lambda.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ModelError::Eigenvalue { index: index + 1, value });
            }
        }
        if bmat.nrows() != n {
            return Err(ModelError::Dimension { what: "control matrix rows", expected: n, got: bmat.nrows() });
        }
        if bmat.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("control matrix"));
        }
        if pi_set.is_empty() {
            return Err(ModelError::Projection("index set is empty".into()));
        }
        if pi_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::Projection("indices must be strictly increasing".into()));
        }
        if pi_set[0] == 0 || *pi_set.last().unwrap() > n {
            return Err(ModelError::Projection(format!("indices must lie in 1..={n}")));
        }
        if y0.len() != n {
            return Err(ModelError::Dimension { what: "initial datum", expected: n, got: y0.len() });
        }
        if yb.len() != pi_set.len() {
            return Err(ModelError::Dimension { what: "target", expected: pi_set.len(), got: yb.len() });
        }
        if y0.iter().chain(yb.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("initial datum or target"));
        }
        Ok(Self { q, b, lambda, bmat, pi_set: pi_set.iter().map(|i| i - 1).collect(), y0, yb })
    }

    /// Dirichlet heat equation on `[0, π]` in the sine basis: `λ_k = k²`
    /// and the control operator of [`example1_control_matrix`].
    pub fn heat1d(
        n: usize,
        q: f64,
        b: f64,
        pi_set: &[usize],
        y0: DVector<f64>,
        yb: DVector<f64>,
    ) -> Result<Self, ModelError> {
        if n < 2 {
            return Err(ModelError::Empty { modes: n, controls: n.saturating_sub(1) });
        }
        Self::new(q, b, heat1d_eigenvalues(n), example1_control_matrix(n), pi_set, y0, yb)
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn n_modes(&self) -> usize {
        self.lambda.len()
    }

    pub fn n_controls(&self) -> usize {
        self.bmat.ncols()
    }

    /// Dimension of the target subspace.
    pub fn n_target(&self) -> usize {
        self.pi_set.len()
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn bmat(&self) -> &DMatrix<f64> {
        &self.bmat
    }

    /// Zero-based mode indices spanning the target subspace.
    pub fn pi_indices(&self) -> &[usize] {
        &self.pi_set
    }

    pub fn y0(&self) -> &DVector<f64> {
        &self.y0
    }

    pub fn yb(&self) -> &DVector<f64> {
        &self.yb
    }

    pub fn with_target(mut self, yb: DVector<f64>) -> Result<Self, ModelError> {
        if yb.len() != self.pi_set.len() {
            return Err(ModelError::Dimension { what: "target", expected: self.pi_set.len(), got: yb.len() });
        }
        self.yb = yb;
        Ok(self)
    }

    /// Π: coordinate selection onto the target subspace.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.pi_set.len(), self.pi_set.iter().map(|&i| v[i]))
    }

    /// Π*: zero padding back to all `N` modes.
    pub fn embed(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_modes());
        for (p, &i) in self.pi_set.iter().enumerate() {
            v[i] = w[p];
        }
        v
    }

    /// Rows of the control matrix belonging to the target modes (`P × M`).
    pub fn target_control_rows(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.pi_set.len(), self.n_controls(), |p, m| self.bmat[(self.pi_set[p], m)])
    }

    fn check_time(&self, t: f64) -> Result<(), ModelError> {
        if !(t >= 0.0 && t <= self.b) {
            return Err(ModelError::TimeOutOfRange { t, b: self.b });
        }
        Ok(())
    }
}

pub fn heat1d_eigenvalues(n: usize) -> DVector<f64> {
    DVector::from_fn(n, |k, _| ((k + 1) * (k + 1)) as f64)
}

/// `N × (N-1)` matrix of `Bu = 2u₂e₁ + Σ_{k>=2} u_k e_k`; column `j`
/// carries the input coefficient `u_{j+2}`.
pub fn example1_control_matrix(n: usize) -> DMatrix<f64> {
    assert!(n >= 2, "the example control operator needs at least two modes");
    let mut b = DMatrix::zeros(n, n - 1);
    b[(0, 0)] = 2.0;
    for k in 1..n {
        b[(k, k - 1)] = 1.0;
    }
    b
}

/// Fractional state operator: mode `k` is scaled by `E_{q,1}(-λ_k t^q)`.
pub fn apply_sq(model: &SpectralModel, t: f64, v: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
    model.check_time(t)?;
    check_len(v, model.n_modes())?;
    let tq = t.powf(model.q);
    Ok(DVector::from_fn(v.len(), |k, _| ml_unchecked(model.q, 1.0, -model.lambda[k] * tq) * v[k]))
}

/// Fractional forcing operator: mode `k` is scaled by `E_{q,q}(-λ_k t^q)`.
pub fn apply_tq(model: &SpectralModel, t: f64, v: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
    model.check_time(t)?;
    check_len(v, model.n_modes())?;
    let tq = t.powf(model.q);
    Ok(DVector::from_fn(v.len(), |k, _| ml_unchecked(model.q, model.q, -model.lambda[k] * tq) * v[k]))
}

/// Classical semigroup `e^{-λ_k τ}` (used for the smoothing factor).
pub fn apply_s_classical(model: &SpectralModel, tau: f64, v: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
    if !(tau >= 0.0) {
        return Err(ModelError::NegativeTime(tau));
    }
    check_len(v, model.n_modes())?;
    Ok(DVector::from_fn(v.len(), |k, _| (-model.lambda[k] * tau).exp() * v[k]))
}

fn check_len(v: &DVector<f64>, n: usize) -> Result<(), ModelError> {
    if v.len() != n {
        return Err(ModelError::Dimension { what: "state vector", expected: n, got: v.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorNorms {
    /// Bound on the classical semigroup; 1 for a non-negative spectrum.
    pub m_s: f64,
    /// Operator norm of the control matrix.
    pub m_b: f64,
}

pub fn operator_norms(model: &SpectralModel) -> OperatorNorms {
    let m_b = model
        .bmat
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0_f64, |a, &s| a.max(s));
    OperatorNorms { m_s: 1.0, m_b }
}

/// Weight `c_k` of one nonlocal evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Scalar(f64),
    Matrix(DMatrix<f64>),
}

impl Weight {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Weight::Scalar(c) => v * *c,
            Weight::Matrix(c) => c * v,
        }
    }

    /// Spectral norm.
    pub fn norm(&self) -> f64 {
        match self {
            Weight::Scalar(c) => c.abs(),
            Weight::Matrix(c) => c.clone().svd(false, false).singular_values.iter().fold(0.0_f64, |a, &s| a.max(s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlocalPoint {
    pub t: f64,
    pub weight: Weight,
}

/// `g(y) = Σ_k c_k y(t_k)` with every `t_k` in `[δ, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlocalSpec {
    delta: f64,
    points: Vec<NonlocalPoint>,
}

impl NonlocalSpec {
    pub fn new(delta: f64, points: Vec<NonlocalPoint>, model: &SpectralModel) -> Result<Self, ModelError> {
        let b = model.b();
        if !(delta > 0.0 && delta < b) {
            return Err(ModelError::Delta { delta, b });
        }
        for p in &points {
            if !p.t.is_finite() || p.t < delta {
                return Err(ModelError::PointBeforeDelta { t: p.t, delta });
            }
            if p.t > b {
                return Err(ModelError::PointAfterHorizon { t: p.t, b });
            }
            match &p.weight {
                Weight::Scalar(c) if !c.is_finite() => return Err(ModelError::NonFinite("nonlocal weight")),
                Weight::Matrix(c) => {
                    let n = model.n_modes();
                    if c.nrows() != n || c.ncols() != n {
                        return Err(ModelError::Dimension { what: "nonlocal weight matrix", expected: n, got: c.nrows().max(c.ncols()) });
                    }
                    if c.iter().any(|v| !v.is_finite()) {
                        return Err(ModelError::NonFinite("nonlocal weight"));
                    }
                }
                _ => {}
            }
        }
        Ok(Self { delta, points })
    }

    /// `g ≡ 0`.
    pub fn none(model: &SpectralModel) -> Self {
        Self { delta: 0.5 * model.b(), points: Vec::new() }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn points(&self) -> &[NonlocalPoint] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `Σ‖c_k‖`, so that `‖g(y)‖ <= weight_sum() · ‖y‖_C`.
    pub fn weight_sum(&self) -> f64 {
        self.points.iter().map(|p| p.weight.norm()).sum()
    }
}

/// Evaluates `g(z)`. Point values are linearly interpolated using only the
/// nodes of `z` at or after `δ`; a point falling before the first such node
/// takes that node's value. The result therefore never reads `z` on `[0, δ)`.
pub fn eval_g(spec: &NonlocalSpec, z: &Trajectory) -> Result<DVector<f64>, ModelError> {
    let mut out = DVector::zeros(z.n_modes());
    if spec.points.is_empty() {
        return Ok(out);
    }
    let first = z.grid.partition_point(|&t| t < spec.delta);
    if first == z.grid.len() {
        return Err(ModelError::Trajectory(format!("no grid node at or after delta = {}", spec.delta)));
    }
    for p in &spec.points {
        if p.t < spec.delta {
            return Err(ModelError::PointBeforeDelta { t: p.t, delta: spec.delta });
        }
        if p.t > z.horizon() {
            return Err(ModelError::PointAfterHorizon { t: p.t, b: z.horizon() });
        }
        let value = if p.t <= z.grid[first] {
            z.values.column(first).into_owned()
        } else {
            z.interpolate_from(first, p.t)
        };
        out += p.weight.apply(&value);
    }
    Ok(out)
}

type EvalFn = dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync;
type BoundFn = dyn Fn(f64) -> f64 + Send + Sync;

/// Semilinear term `f(t, y)` together with a bound `‖f(t, y)‖ <= ν(t)`.
#[derive(Clone)]
pub struct NonlinearitySpec {
    label: String,
    eval: Arc<EvalFn>,
    bound: Arc<BoundFn>,
    zero: bool,
}

impl fmt::Debug for NonlinearitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearitySpec").field("label", &self.label).finish_non_exhaustive()
    }
}

impl NonlinearitySpec {
    pub fn new(
        label: impl Into<String>,
        eval: impl Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        bound: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { label: label.into(), eval: Arc::new(eval), bound: Arc::new(bound), zero: false }
    }

    pub fn zero() -> Self {
        Self {
            label: "zero".into(),
            eval: Arc::new(|_, y: &DVector<f64>| DVector::zeros(y.len())),
            bound: Arc::new(|_| 0.0),
            zero: true,
        }
    }

    /// `f_k(t, y) = (a/√N) sin(y_k + ωt)`, so `‖f‖ <= a`.
    pub fn sine(n: usize, amplitude: f64, omega: f64) -> Self {
        let scale = amplitude / (n as f64).sqrt();
        Self::new(
            format!("sine(a={amplitude}, omega={omega})"),
            move |t, y: &DVector<f64>| y.map(|v| scale * (v + omega * t).sin()),
            move |_| amplitude.abs(),
        )
    }

    /// `f(t, y) = a tanh(‖y‖) y/‖y‖`, so `‖f‖ <= a`.
    pub fn saturating(amplitude: f64) -> Self {
        Self::new(
            format!("saturating(a={amplitude})"),
            move |_, y: &DVector<f64>| {
                let r = y.norm();
                if r < 1e-8 {
                    y * amplitude
                } else {
                    y * (amplitude * r.tanh() / r)
                }
            },
            move |_| amplitude.abs(),
        )
    }

    /// State-independent forcing `f(t, y) = c`.
    pub fn constant(c: DVector<f64>) -> Self {
        let norm = c.norm();
        Self::new(format!("constant(|c|={norm})"), move |_, _| c.clone(), move |_| norm)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn eval(&self, t: f64, y: &DVector<f64>) -> DVector<f64> {
        (self.eval)(t, y)
    }

    pub fn bound(&self, t: f64) -> f64 {
        (self.bound)(t)
    }

    /// Largest `‖f(t, y)‖ - ν(t)` over random samples with `t ∈ [0, b]` and
    /// `‖y‖_∞ <= state_scale`. Non-positive means no violation was found.
    pub fn spot_check<R: Rng>(&self, n: usize, b: f64, samples: usize, state_scale: f64, rng: &mut R) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..samples {
            let t = rng.gen_range(0.0..=b);
            let y = DVector::from_fn(n, |_, _| rng.gen_range(-state_scale..=state_scale));
            let excess = self.eval(t, &y).norm() - self.bound(t);
            worst = worst.max(excess);
        }
        worst
    }
}

/// Time-gridded spectral coordinates; column `i` is the state at `grid[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: Vec<f64>,
    values: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(grid: Vec<f64>, values: DMatrix<f64>) -> Result<Self, ModelError> {
        if grid.len() < 2 {
            return Err(ModelError::Trajectory("grid needs at least two nodes".into()));
        }
        if grid[0] != 0.0 {
            return Err(ModelError::Trajectory(format!("grid must start at 0, starts at {}", grid[0])));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) || !grid[grid.len() - 1].is_finite() {
            return Err(ModelError::Trajectory("grid must be strictly increasing".into()));
        }
        if values.ncols() != grid.len() {
            return Err(ModelError::Dimension { what: "trajectory columns", expected: grid.len(), got: values.ncols() });
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Vec<f64>, v: &DVector<f64>) -> Result<Self, ModelError> {
        let values = DMatrix::from_fn(v.len(), grid.len(), |k, _| v[k]);
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn n_modes(&self) -> usize {
        self.values.nrows()
    }

    pub fn horizon(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    pub fn state(&self, i: usize) -> DVector<f64> {
        self.values.column(i).into_owned()
    }

    pub fn final_state(&self) -> DVector<f64> {
        self.state(self.grid.len() - 1)
    }

    /// Piecewise-linear value at `t ∈ [0, b]`.
    pub fn interpolate(&self, t: f64) -> Result<DVector<f64>, ModelError> {
        if !(t >= 0.0 && t <= self.horizon()) {
            return Err(ModelError::TimeOutOfRange { t, b: self.horizon() });
        }
        Ok(self.interpolate_from(0, t))
    }

    fn interpolate_from(&self, first: usize, t: f64) -> DVector<f64> {
        let last = self.grid.len() - 1;
        let j = (first + self.grid[first..].partition_point(|&g| g <= t)).clamp(first + 1, last) - 1;
        let (t0, t1) = (self.grid[j], self.grid[j + 1]);
        let theta = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        if theta == 0.0 {
            return self.state(j);
        }
        if theta == 1.0 {
            return self.state(j + 1);
        }
        self.values.column(j) * (1.0 - theta) + self.values.column(j + 1) * theta
    }

    /// `max_i ‖z(t_i)‖`.
    pub fn sup_norm(&self) -> f64 {
        self.values.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// `max_i ‖z(t_i) - w(t_i)‖`; both trajectories must share the grid.
    pub fn sup_distance(&self, other: &Trajectory) -> Result<f64, ModelError> {
        if self.grid != other.grid || self.n_modes() != other.n_modes() {
            return Err(ModelError::Trajectory("trajectories live on different grids".into()));
        }
        Ok((&self.values - &other.values).column_iter().map(|c| c.norm()).fold(0.0, f64::max))
    }

    /// CSV with header `t,y_1,...,y_N`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for k in 1..=self.n_modes() {
            out.push_str(&format!(",y_{k}"));
        }
        out.push('\n');
        for (i, t) in self.grid.iter().enumerate() {
            out.push_str(&format!("{t:.12e}"));
            for v in self.values.column(i).iter() {
                out.push_str(&format!(",{v:.12e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// `t_i = b i / T`, with the last node exactly `b`.
pub fn uniform_grid(b: f64, steps: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=steps).map(|i| b * i as f64 / steps as f64).collect();
    grid[steps] = b;
    grid
}
