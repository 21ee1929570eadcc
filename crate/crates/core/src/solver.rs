//! Mild solutions by product integration, the control-to-state fixed-point
//! map and the iterations built on it.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::mittag::{gamma_fn, ml_unchecked};
use crate::model::{operator_norms, uniform_grid, ModelError, NonlinearitySpec, NonlocalSpec, SpectralModel, Trajectory};
use crate::varmin::{initial_offset, minimize_j, ControlLaw, Gramian, HnOperator, MinimizeReport, Smoothing, VarminError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Varmin(#[from] VarminError),
    #[error("invalid fixed-point configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at t = {t}")]
    NonFinite { what: &'static str, t: f64 },
    #[error("nonlocal fixed point did not settle after {iterations} iterations (last change {delta:.3e})")]
    InnerNotConverged { iterations: usize, delta: f64 },
    #[error("Picard iteration for smoothing index {smoothing} did not converge (last delta {delta:.3e})")]
    SweepMember { smoothing: Smoothing, delta: f64 },
}

/// Kernel moments on a uniform grid. With `G_k(τ) = τ^q E_{q,q+1}(-λ_k τ^q)`,
/// the weight of a step lying `m` steps back is `G_k(m h) - G_k((m-1) h)`.
#[derive(Debug, Clone)]
pub struct VolterraWeights {
    grid: Vec<f64>,
    increments: DMatrix<f64>,
    state: DMatrix<f64>,
}

impl VolterraWeights {
    pub fn new(model: &SpectralModel, steps: usize) -> Result<Self, SolverError> {
        if steps == 0 {
            return Err(SolverError::Config("grid needs at least one step".into()));
        }
        let q = model.q();
        let n = model.n_modes();
        let grid = uniform_grid(model.b(), steps);
        let h = model.b() / steps as f64;
        let mut increments = DMatrix::zeros(n, steps + 1);
        let mut state = DMatrix::zeros(n, steps + 1);
        for k in 0..n {
            let l = model.lambda()[k];
            let mut prev = 0.0;
            for m in 0..=steps {
                let tq = (h * m as f64).powf(q);
                let g = tq * ml_unchecked(q, q + 1.0, -l * tq);
                if m > 0 {
                    // G is nondecreasing; rounding must not flip a tiny increment.
                    increments[(k, m)] = (g - prev).max(0.0);
                }
                prev = g;
                state[(k, m)] = ml_unchecked(q, 1.0, -l * grid[m].powf(q));
            }
        }
        Ok(Self { grid, increments, state })
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Weight of mode `k` for the step lying `m >= 1` steps back.
    pub fn weight(&self, k: usize, m: usize) -> f64 {
        self.increments[(k, m)]
    }

    /// `E_{q,1}(-λ_k t_i^q)`.
    pub fn state_factor(&self, k: usize, i: usize) -> f64 {
        self.state[(k, i)]
    }
}

/// Solves `y(t) = S_q(t) start + ∫_0^t (t-s)^{q-1} T_q(t-s)[forcing(s) + f(s, y(s))] ds`
/// on the weights' grid. The integrand on each step is replaced by the mean
/// of its endpoint values; the current endpoint is predicted from the
/// previous one and corrected once.
pub fn integrate(
    weights: &VolterraWeights,
    fspec: &NonlinearitySpec,
    start: &DVector<f64>,
    forcing: &dyn Fn(usize) -> DVector<f64>,
) -> Result<Trajectory, SolverError> {
    let n = start.len();
    let steps = weights.steps();
    let grid = weights.grid();
    let eval = |i: usize, y: &DVector<f64>| -> Result<DVector<f64>, SolverError> {
        let mut v = forcing(i);
        if !fspec.is_zero() {
            v += fspec.eval(grid[i], y);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::NonFinite { what: "integrand", t: grid[i] });
        }
        Ok(v)
    };

    let mut values = DMatrix::zeros(n, steps + 1);
    values.set_column(0, start);
    // Column j holds the step mean (F_j + F_{j+1}) / 2.
    let mut means = DMatrix::<f64>::zeros(n, steps);
    let mut left = eval(0, start)?;
    for i in 1..=steps {
        let mut history = DVector::zeros(n);
        for k in 0..n {
            let mut acc = weights.state_factor(k, i) * start[k];
            for j in 0..i - 1 {
                acc += weights.weight(k, i - j) * means[(k, j)];
            }
            history[k] = acc + 0.5 * weights.weight(k, 1) * left[k];
        }
        let diag = DVector::from_fn(n, |k, _| 0.5 * weights.weight(k, 1));
        let predicted = &history + diag.component_mul(&left);
        let corrected = &history + diag.component_mul(&eval(i, &predicted)?);
        let right = eval(i, &corrected)?;
        means.set_column(i - 1, &((&left + &right) * 0.5));
        values.set_column(i, &corrected);
        left = right;
    }
    Ok(Trajectory::new(grid.to_vec(), values)?)
}

/// Where the nonlocal term takes its trajectory.
#[derive(Debug, Clone, Copy)]
pub enum GSource<'a> {
    /// `g` evaluated at a given trajectory.
    Frozen(&'a Trajectory),
    /// `g` evaluated at the solution itself, by an outer fixed-point loop.
    SelfConsistent { max_iter: usize, tol: f64 },
}

/// Mild solution with initial condition `y(0) = y₀ - g(·)` and control `u`.
pub fn solve_mild(
    model: &SpectralModel,
    gspec: &NonlocalSpec,
    fspec: &NonlinearitySpec,
    u: &dyn Fn(f64) -> DVector<f64>,
    g_source: GSource<'_>,
    steps: usize,
) -> Result<Trajectory, SolverError> {
    let weights = VolterraWeights::new(model, steps)?;
    let grid = weights.grid().to_vec();
    let bmat = model.bmat();
    let controls: Vec<DVector<f64>> = grid
        .iter()
        .map(|&t| {
            let v = u(t);
            if v.len() != model.n_controls() {
                return Err(SolverError::Config(format!("control has {} components, expected {}", v.len(), model.n_controls())));
            }
            let bu = bmat * v;
            if bu.iter().any(|x| !x.is_finite()) {
                return Err(SolverError::NonFinite { what: "control", t });
            }
            Ok(bu)
        })
        .collect::<Result<_, _>>()?;
    let forcing = |i: usize| controls[i].clone();
    match g_source {
        GSource::Frozen(z) => {
            let start = initial_offset(model, gspec, z, Smoothing::Infinite)?;
            integrate(&weights, fspec, &start, &forcing)
        }
        GSource::SelfConsistent { max_iter, tol } => {
            let mut z = Trajectory::constant(grid, model.y0())?;
            let mut delta = f64::INFINITY;
            for _ in 0..max_iter.max(1) {
                let start = initial_offset(model, gspec, &z, Smoothing::Infinite)?;
                let y = integrate(&weights, fspec, &start, &forcing)?;
                delta = y.sup_distance(&z)?;
                z = y;
                if delta <= tol {
                    return Ok(z);
                }
            }
            Err(SolverError::InnerNotConverged { iterations: max_iter, delta })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointConfig {
    pub epsilon: f64,
    pub smoothing: Smoothing,
    pub grid_t: usize,
    pub max_picard: usize,
    pub picard_tol: f64,
    pub relaxation: f64,
}

impl FixedPointConfig {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, smoothing: Smoothing::Infinite, grid_t: 256, max_picard: 50, picard_tol: 1e-9, relaxation: 1.0 }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SolverError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.grid_t < 8 {
            return Err(SolverError::Config(format!("grid_T must be at least 8, got {}", self.grid_t)));
        }
        if !(self.picard_tol > 0.0) {
            return Err(SolverError::Config(format!("picard_tol must be positive, got {}", self.picard_tol)));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(SolverError::Config(format!("relaxation must lie in (0, 1], got {}", self.relaxation)));
        }
        if self.max_picard == 0 {
            return Err(SolverError::Config("max_picard must be positive".into()));
        }
        Ok(())
    }
}

/// One application of the fixed-point map.
#[derive(Debug, Clone)]
pub struct ThetaOutput {
    pub trajectory: Trajectory,
    pub law: ControlLaw,
    pub h: DVector<f64>,
    pub minimize: MinimizeReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NTraceEntry {
    pub smoothing: Smoothing,
    pub sup_distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisReport {
    #[serde(skip)]
    pub trajectory: Trajectory,
    #[serde(skip)]
    pub law: ControlLaw,
    pub epsilon: f64,
    pub smoothing: Smoothing,
    pub grid_t: usize,
    pub phi_hat: Vec<f64>,
    pub rho: f64,
    pub final_error: f64,
    /// `‖(Πy(b) - y_b) - (Γφ̂ - h)‖` for the last map evaluation.
    pub identity_residual: f64,
    pub converged: bool,
    pub picard_iters: usize,
    pub picard_trace: Vec<f64>,
    pub relaxation: f64,
    pub minimizer_residuals: Vec<f64>,
    pub zero_case: bool,
    pub h_norm: f64,
    pub iterate_sup_norms: Vec<f64>,
    pub iterate_bounds: Vec<f64>,
    pub n_trace: Option<Vec<NTraceEntry>>,
}

impl SynthesisReport {
    /// Whether every map output stayed inside its a-priori ball.
    pub fn iterates_bounded(&self) -> bool {
        self.iterate_sup_norms.iter().zip(&self.iterate_bounds).all(|(n, r)| n <= r)
    }
}

/// Everything one fixed-point run needs, precomputed for its grid.
pub struct Synthesizer<'a> {
    model: &'a SpectralModel,
    gspec: &'a NonlocalSpec,
    fspec: &'a NonlinearitySpec,
    gram: &'a Gramian,
    cfg: FixedPointConfig,
    weights: VolterraWeights,
    hn: HnOperator,
    bound: BallBound,
}

impl<'a> Synthesizer<'a> {
    pub fn new(
        model: &'a SpectralModel,
        gspec: &'a NonlocalSpec,
        fspec: &'a NonlinearitySpec,
        gram: &'a Gramian,
        cfg: FixedPointConfig,
    ) -> Result<Self, SolverError> {
        cfg.validate()?;
        if gram.dim() != model.n_target() {
            return Err(SolverError::Config(format!("Gramian is {}x{}, target has dimension {}", gram.dim(), gram.dim(), model.n_target())));
        }
        let weights = VolterraWeights::new(model, cfg.grid_t)?;
        let hn = HnOperator::new(model, weights.grid())?;
        let bound = BallBound::new(model, gspec, fspec, gram, cfg.epsilon, weights.grid());
        Ok(Self { model, gspec, fspec, gram, cfg, weights, hn, bound })
    }

    pub fn config(&self) -> &FixedPointConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &[f64] {
        self.weights.grid()
    }

    /// Uncontrolled, unforced solution with `g` taken at the constant
    /// trajectory `y₀`.
    pub fn initial_guess(&self) -> Result<Trajectory, SolverError> {
        let constant = Trajectory::constant(self.grid().to_vec(), self.model.y0())?;
        let start = initial_offset(self.model, self.gspec, &constant, self.cfg.smoothing)?;
        let n = self.model.n_modes();
        integrate(&self.weights, &NonlinearitySpec::zero(), &start, &|_| DVector::zeros(n))
    }

    pub fn theta(&self, z: &Trajectory) -> Result<ThetaOutput, SolverError> {
        let h = self.hn.eval(self.model, self.gspec, self.fspec, z, self.cfg.smoothing)?;
        let minimize = minimize_j(self.gram, &h, self.cfg.epsilon)?;
        let law = ControlLaw::new(self.model, minimize.phi_hat.clone())?;
        let start = initial_offset(self.model, self.gspec, z, self.cfg.smoothing)?;
        let bmat = self.model.bmat();
        let grid = self.grid();
        let forcing = |i: usize| bmat * law.value_unchecked(grid[i]);
        let trajectory = integrate(&self.weights, self.fspec, &start, &forcing)?;
        Ok(ThetaOutput { trajectory, law, h, minimize })
    }

    /// A-priori radius of the ball the map sends inputs of sup norm `z_norm`
    /// into.
    pub fn ball_radius(&self, z_norm: f64) -> f64 {
        self.bound.radius(z_norm)
    }

    pub fn picard(&self) -> Result<SynthesisReport, SolverError> {
        self.picard_from(self.initial_guess()?)
    }

    /// Damped iteration `z ← (1-ω) z + ω Θ(z)`. The damping `ω` is halved,
    /// down to 1/8, whenever five iterations pass without a new smallest
    /// delta.
    pub fn picard_from(&self, mut z: Trajectory) -> Result<SynthesisReport, SolverError> {
        let mut relax = self.cfg.relaxation;
        let mut trace = Vec::new();
        let mut residuals = Vec::new();
        let mut norms = Vec::new();
        let mut bounds = Vec::new();
        let mut best = f64::INFINITY;
        let mut stalled = 0;
        let mut converged = false;
        let mut last = None;
        for _ in 0..self.cfg.max_picard {
            let out = self.theta(&z)?;
            let delta = out.trajectory.sup_distance(&z)?;
            trace.push(delta);
            residuals.push(out.minimize.residual);
            norms.push(out.trajectory.sup_norm());
            bounds.push(self.bound.radius(z.sup_norm()));
            if delta <= self.cfg.picard_tol {
                converged = true;
                last = Some(out);
                break;
            }
            if delta < best {
                best = delta;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= 5 {
                    relax = (relax * 0.5).max(0.125);
                    stalled = 0;
                }
            }
            let next = if relax == 1.0 {
                out.trajectory.clone()
            } else {
                let blended = z.values() * (1.0 - relax) + out.trajectory.values() * relax;
                Trajectory::new(z.grid().to_vec(), blended)?
            };
            last = Some(out);
            z = next;
        }
        let out = last.expect("at least one Picard iteration runs");
        let projected = self.model.project(&out.trajectory.final_state());
        let miss = &projected - self.model.yb();
        let predicted = &self.gram.mat * &out.minimize.phi_hat - &out.h;
        Ok(SynthesisReport {
            epsilon: self.cfg.epsilon,
            smoothing: self.cfg.smoothing,
            grid_t: self.cfg.grid_t,
            phi_hat: out.law.phi_hat.iter().copied().collect(),
            rho: out.law.rho,
            final_error: miss.norm(),
            identity_residual: (&miss - predicted).norm(),
            converged,
            picard_iters: trace.len(),
            picard_trace: trace,
            relaxation: relax,
            minimizer_residuals: residuals,
            zero_case: out.minimize.zero_case,
            h_norm: out.h.norm(),
            iterate_sup_norms: norms,
            iterate_bounds: bounds,
            n_trace: None,
            trajectory: out.trajectory,
            law: out.law,
        })
    }
}

/// Radius `r` with `‖Θ(z)‖_C <= r(‖z‖_C)`:
/// `M_S‖y₀‖ + M_S² Λ_g + M_S b^q/Γ(q+1) (‖ν‖_C + M_S M_B² M_S R)`, where
/// `Λ_g = Σ‖c_k‖ ‖z‖_C` bounds the nonlocal term and
/// `R = 2 max(0, H - ε)/σ_min(Γ)` bounds the minimizer through an upper
/// bound `H` on `‖h(z)‖`.
#[derive(Debug, Clone, Copy)]
struct BallBound {
    m_s: f64,
    m_b: f64,
    y0: f64,
    yb: f64,
    weight_sum: f64,
    nu: f64,
    horizon_factor: f64,
    epsilon: f64,
    sigma_min: f64,
}

impl BallBound {
    fn new(
        model: &SpectralModel,
        gspec: &NonlocalSpec,
        fspec: &NonlinearitySpec,
        gram: &Gramian,
        epsilon: f64,
        grid: &[f64],
    ) -> Self {
        let norms = operator_norms(model);
        let q = model.q();
        let horizon_factor = norms.m_s * model.b().powf(q) / gamma_fn(q + 1.0).unwrap_or(f64::NAN);
        let nu = grid.iter().map(|&t| fspec.bound(t)).fold(0.0, f64::max);
        Self {
            m_s: norms.m_s,
            m_b: norms.m_b,
            y0: model.y0().norm(),
            yb: model.yb().norm(),
            weight_sum: gspec.weight_sum(),
            nu,
            horizon_factor,
            epsilon,
            sigma_min: gram.min_eigenvalue().max(0.0),
        }
    }

    fn radius(&self, z_norm: f64) -> f64 {
        let lambda_g = self.weight_sum * z_norm;
        let offset = self.m_s * self.y0 + self.m_s * self.m_s * lambda_g;
        let h_bound = self.yb + self.m_s * (self.y0 + self.m_s * lambda_g) + self.horizon_factor * self.nu;
        let excess = (h_bound - self.epsilon).max(0.0);
        let minimizer = if excess == 0.0 { 0.0 } else { 2.0 * excess / self.sigma_min };
        offset + self.horizon_factor * (self.nu + self.m_s * self.m_b * self.m_b * self.m_s * minimizer)
    }
}

/// One map evaluation with a fresh [`Synthesizer`].
pub fn theta_map(
    model: &SpectralModel,
    gspec: &NonlocalSpec,
    fspec: &NonlinearitySpec,
    cfg: &FixedPointConfig,
    gram: &Gramian,
    z: &Trajectory,
) -> Result<(Trajectory, ControlLaw), SolverError> {
    let out = Synthesizer::new(model, gspec, fspec, gram, *cfg)?.theta(z)?;
    Ok((out.trajectory, out.law))
}

pub fn picard_solve(
    model: &SpectralModel,
    gspec: &NonlocalSpec,
    fspec: &NonlinearitySpec,
    cfg: &FixedPointConfig,
    gram: &Gramian,
) -> Result<SynthesisReport, SolverError> {
    Synthesizer::new(model, gspec, fspec, gram, *cfg)?.picard()
}

/// Picard runs for each smoothing index in increasing order, recording the
/// sup distance between consecutive solutions. Returns the last report.
pub fn approximating_sweep(
    model: &SpectralModel,
    gspec: &NonlocalSpec,
    fspec: &NonlinearitySpec,
    cfg: &FixedPointConfig,
    gram: &Gramian,
    n_list: &[Smoothing],
) -> Result<SynthesisReport, SolverError> {
    if n_list.is_empty() {
        return Err(SolverError::Config("smoothing list is empty".into()));
    }
    let key = |s: &Smoothing| match s {
        Smoothing::Finite(n) => *n as u64,
        Smoothing::Infinite => u64::MAX,
    };
    if n_list.windows(2).any(|w| key(&w[0]) >= key(&w[1])) {
        return Err(SolverError::Config("smoothing indices must be strictly increasing".into()));
    }
    let mut trace = Vec::new();
    let mut previous: Option<SynthesisReport> = None;
    for &smoothing in n_list {
        let member_cfg = FixedPointConfig { smoothing, ..*cfg };
        let report = picard_solve(model, gspec, fspec, &member_cfg, gram)?;
        if !report.converged {
            let delta = report.picard_trace.last().copied().unwrap_or(f64::NAN);
            return Err(SolverError::SweepMember { smoothing, delta });
        }
        if let Some(prev) = &previous {
            trace.push(NTraceEntry { smoothing, sup_distance: report.trajectory.sup_distance(&prev.trajectory)? });
        }
        previous = Some(report);
    }
    let mut last = previous.expect("list is nonempty");
    last.n_trace = Some(trace);
    Ok(last)
}
