//! The `fracctl` command line: experiment plans, scenario checks and
//! Mittag-Leffler tables.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::mittag::{ml, MlParams};
use crate::scenario::{labels, read_raw, RawWeight, Scenario, ScenarioError};
use crate::solver::{picard_solve, FixedPointConfig, SynthesisReport};
use crate::varmin::{assemble_gramian, check_linear_pac, Gramian, Smoothing};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_NOT_CONTROLLABLE: i32 = 4;

/// Final-error slack per unit of identity residual.
pub const SLACK_FACTOR: f64 = 10.0;

#[derive(Debug, Parser)]
#[command(name = "fracctl", version, about = "Approximate control synthesis for nonlocal fractional evolution equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (epsilon, smoothing, grid) combination of an experiment plan.
    Run {
        plan: PathBuf,
        /// Number of runs executed concurrently.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory (overrides the plan).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file and print a checklist.
    Validate { scenario: PathBuf },
    /// Tabulate E_{alpha,beta}(x) on a range as CSV.
    Ml {
        #[arg(long, allow_hyphen_values = true)]
        alpha: f64,
        #[arg(long, allow_hyphen_values = true)]
        beta: f64,
        #[arg(long, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, allow_hyphen_values = true)]
        to: f64,
        #[arg(long, allow_hyphen_values = true)]
        step: f64,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(sink, "{}", e.render());
            return e.exit_code();
        }
    };
    match cli.command {
        Command::Run { plan, jobs, out } => run(&plan, jobs, out.as_deref(), stderr),
        Command::Validate { scenario } => validate(&scenario, stdout, stderr),
        Command::Ml { alpha, beta, from, to, step } => tabulate_ml(alpha, beta, from, to, step, stdout, stderr),
    }
}

fn default_n_list() -> Vec<Smoothing> {
    vec![Smoothing::Infinite]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Scenario file, relative to the plan's directory.
    pub scenario: PathBuf,
    pub epsilons: Vec<f64>,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<Smoothing>,
    #[serde(rename = "grid_T", default)]
    pub grid_t: Vec<usize>,
    /// Output directory, relative to the plan's directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub max_picard: Option<usize>,
    #[serde(default)]
    pub picard_tol: Option<f64>,
    #[serde(default)]
    pub relaxation: Option<f64>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), String> {
        if self.epsilons.is_empty() || self.n_list.is_empty() {
            return Err("epsilons and n_list must be nonempty".into());
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err("epsilons must be positive".into());
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err("epsilons must be strictly decreasing".into());
        }
        if self.grid_t.iter().any(|&t| t < 8) {
            return Err("every grid_T must be at least 8".into());
        }
        Ok(())
    }
}

fn config_error(stderr: &mut dyn Write, message: impl std::fmt::Display) -> i32 {
    let _ = writeln!(stderr, "error: {message}");
    EXIT_CONFIG
}

fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone, Copy)]
struct RunKey {
    epsilon: f64,
    smoothing: Smoothing,
    grid_t: usize,
}

impl RunKey {
    fn stem(&self) -> String {
        format!("eps{:e}_n{}_T{}", self.epsilon, self.smoothing, self.grid_t)
    }
}

struct RunOutcome {
    key: RunKey,
    report: Result<SynthesisReport, String>,
}

impl RunOutcome {
    fn slack(&self) -> f64 {
        self.report.as_ref().map_or(f64::NAN, |r| SLACK_FACTOR * r.identity_residual)
    }

    fn passed(&self) -> bool {
        match &self.report {
            Ok(r) => r.converged && r.final_error <= self.key.epsilon + self.slack(),
            Err(_) => false,
        }
    }
}

fn run(plan_path: &Path, jobs: Option<usize>, out: Option<&Path>, stderr: &mut dyn Write) -> i32 {
    let text = match fs::read_to_string(plan_path) {
        Ok(t) => t,
        Err(e) => return config_error(stderr, format!("cannot read plan {}: {e}", plan_path.display())),
    };
    let plan: ExperimentPlan = match serde_json::from_str(&text) {
        Ok(p) => p,
        Err(e) => return config_error(stderr, format!("malformed plan: {e}")),
    };
    if let Err(e) = plan.validate() {
        return config_error(stderr, format!("invalid plan: {e}"));
    }
    let base = plan_path.parent().unwrap_or(Path::new("."));
    let scenario_path = base.join(&plan.scenario);
    let scenario = match Scenario::load(&scenario_path) {
        Ok(s) => s,
        Err(e) => return config_error(stderr, e),
    };
    let out_dir = match (out, &plan.output) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => base.join(o),
        (None, None) => base.join("out"),
    };
    if let Err(e) = fs::create_dir_all(&out_dir) {
        return config_error(stderr, format!("cannot create {}: {e}", out_dir.display()));
    }
    let grids = if plan.grid_t.is_empty() { vec![scenario.grid_t.unwrap_or(256)] } else { plan.grid_t.clone() };

    let gram = match assemble_gramian(&scenario.model) {
        Ok(g) => g,
        Err(e) => return config_error(stderr, format!("Gramian assembly failed: {e}")),
    };
    let pac = check_linear_pac(&gram);
    let pac_record = json!({
        "min_eig": pac.min_eig,
        "rank_tol": pac.rank_tol,
        "controllable": pac.controllable,
        "eigenvalues": gram.eigenvalues().iter().copied().collect::<Vec<_>>(),
        "quad_nodes": gram.quad_nodes,
    });
    let written = write_atomic(&out_dir.join("pac_check.json"), serde_json::to_string_pretty(&pac_record).unwrap().as_bytes())
        .and_then(|_| write_atomic(&out_dir.join("gramian.csv"), matrix_csv(&gram.mat).as_bytes()));
    if let Err(e) = written {
        return config_error(stderr, format!("cannot write to {}: {e}", out_dir.display()));
    }
    if !pac.controllable {
        let _ = writeln!(
            stderr,
            "error: linear system is not controllable on the target subspace: min_gram_eig = {:e} (tolerance {:e})",
            pac.min_eig, pac.rank_tol
        );
        return EXIT_NOT_CONTROLLABLE;
    }
    info!("Gramian: {} quadrature nodes, min eigenvalue {:e}", gram.quad_nodes, pac.min_eig);

    let mut keys = Vec::new();
    for &epsilon in &plan.epsilons {
        for &smoothing in &plan.n_list {
            for &grid_t in &grids {
                keys.push(RunKey { epsilon, smoothing, grid_t });
            }
        }
    }
    let defaults = FixedPointConfig::new(1.0);
    let config = |k: &RunKey| FixedPointConfig {
        epsilon: k.epsilon,
        smoothing: k.smoothing,
        grid_t: k.grid_t,
        max_picard: plan.max_picard.unwrap_or(defaults.max_picard),
        picard_tol: plan.picard_tol.unwrap_or(defaults.picard_tol),
        relaxation: plan.relaxation.unwrap_or(defaults.relaxation),
    };
    if let Err(e) = config(&keys[0]).validate() {
        return config_error(stderr, e);
    }

    let execute = || -> Vec<Result<RunOutcome, std::io::Error>> {
        keys.par_iter()
            .map(|k| {
                let cfg = config(k);
                info!("run {} started", k.stem());
                let report = picard_solve(&scenario.model, &scenario.nonlocal, &scenario.nonlinearity, &cfg, &gram).map_err(|e| e.to_string());
                let outcome = RunOutcome { key: *k, report };
                write_run(&out_dir, &scenario_path, &cfg, &gram, pac.min_eig, &outcome)?;
                info!("run {} finished", k.stem());
                Ok(outcome)
            })
            .collect()
    };
    let results = match jobs {
        Some(0) => return config_error(stderr, "--jobs must be positive"),
        Some(j) => match rayon::ThreadPoolBuilder::new().num_threads(j).build() {
            Ok(pool) => pool.install(execute),
            Err(e) => return config_error(stderr, format!("cannot start worker pool: {e}")),
        },
        None => execute(),
    };
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => return config_error(stderr, format!("cannot write run output: {e}")),
        }
    }

    let mut summary = String::from("epsilon,smoothing_n,grid_T,final_error,picard_iters,converged,min_gram_eig\n");
    for o in &outcomes {
        let (err, iters, conv) = match &o.report {
            Ok(r) => (r.final_error, r.picard_iters, r.converged),
            Err(_) => (f64::NAN, 0, false),
        };
        let _ = writeln!(summary, "{:.6e},{},{},{:.12e},{},{},{:.12e}", o.key.epsilon, o.key.smoothing, o.key.grid_t, err, iters, conv, pac.min_eig);
    }
    let mut files = vec![("summary.csv", summary)];
    if plan.n_list.len() > 1 {
        files.push(("n_trace.csv", n_trace_csv(&plan, &grids, &outcomes)));
    }
    for (name, body) in files {
        if let Err(e) = write_atomic(&out_dir.join(name), body.as_bytes()) {
            return config_error(stderr, format!("cannot write {name}: {e}"));
        }
    }

    let mut code = EXIT_OK;
    for o in &outcomes {
        if !o.passed() {
            code = EXIT_NOT_CONVERGED;
            match &o.report {
                Ok(r) if !r.converged => warn!("run {} did not converge", o.key.stem()),
                Ok(r) => warn!("run {}: final error {:e} exceeds epsilon + slack {:e}", o.key.stem(), r.final_error, o.key.epsilon + o.slack()),
                Err(e) => warn!("run {} failed: {e}", o.key.stem()),
            }
            let _ = writeln!(stderr, "run {} did not meet its target", o.key.stem());
        }
    }
    code
}

fn write_run(
    dir: &Path,
    scenario: &Path,
    cfg: &FixedPointConfig,
    gram: &Gramian,
    min_eig: f64,
    outcome: &RunOutcome,
) -> std::io::Result<()> {
    let stem = outcome.key.stem();
    let record = match &outcome.report {
        Ok(r) => {
            write_atomic(&dir.join(format!("trajectory_{stem}.csv")), r.trajectory.to_csv().as_bytes())?;
            write_atomic(&dir.join(format!("control_{stem}.csv")), control_csv(r).as_bytes())?;
            json!({
                "scenario": scenario.display().to_string(),
                "config": cfg,
                "gram_dim": gram.dim(),
                "min_gram_eig": min_eig,
                "slack": outcome.slack(),
                "within_target": outcome.passed(),
                "iterates_bounded": r.iterates_bounded(),
                "report": r,
            })
        }
        Err(e) => json!({
            "scenario": scenario.display().to_string(),
            "config": cfg,
            "error": e,
        }),
    };
    write_atomic(&dir.join(format!("run_{stem}.json")), serde_json::to_string_pretty(&record).unwrap().as_bytes())
}

fn control_csv(r: &SynthesisReport) -> String {
    let m = r.law.n_controls();
    let mut out = String::from("t");
    for j in 1..=m {
        let _ = write!(out, ",u_{j}");
    }
    out.push('\n');
    for &t in r.trajectory.grid() {
        let _ = write!(out, "{t:.12e}");
        for v in crate::varmin::control_value(&r.law, t).expect("grid lies in [0, b]").iter() {
            let _ = write!(out, ",{v:.12e}");
        }
        out.push('\n');
    }
    out
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn n_trace_csv(plan: &ExperimentPlan, grids: &[usize], outcomes: &[RunOutcome]) -> String {
    let mut out = String::from("epsilon,grid_T,smoothing_n,sup_distance\n");
    for &epsilon in &plan.epsilons {
        for &grid_t in grids {
            let mut prev: Option<&SynthesisReport> = None;
            for &smoothing in &plan.n_list {
                let found = outcomes.iter().find(|o| o.key.epsilon == epsilon && o.key.grid_t == grid_t && o.key.smoothing == smoothing);
                let current = found.and_then(|o| o.report.as_ref().ok());
                if let (Some(p), Some(c)) = (prev, current) {
                    let d = c.trajectory.sup_distance(&p.trajectory).unwrap_or(f64::NAN);
                    let _ = writeln!(out, "{epsilon:.6e},{grid_t},{smoothing},{d:.12e}");
                }
                prev = current;
            }
        }
    }
    out
}

fn seed_from_env() -> u64 {
    std::env::var("FRACCTL_SEED").ok().and_then(|s| s.trim().parse().ok()).unwrap_or(0)
}

#[derive(Debug, Serialize)]
struct CheckLine {
    label: &'static str,
    ok: bool,
    detail: String,
}

fn validate(path: &Path, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let raw = match read_raw(path) {
        Ok(r) => r,
        Err(e) => return config_error(stderr, e),
    };
    let mut lines = Vec::new();
    lines.push(CheckLine {
        label: labels::ORDER,
        ok: raw.q > 0.5 && raw.q <= 1.0,
        detail: format!("q = {} (admissible range (1/2, 1])", raw.q),
    });
    if let Some(g) = &raw.g {
        let delta_ok = g.delta > 0.0 && g.delta < raw.b;
        let late = g.points.iter().filter(|p| p.t >= g.delta && p.t <= raw.b).count();
        let shapes_ok = g.points.iter().all(|p| match &p.c {
            RawWeight::Scalar(c) => c.is_finite(),
            RawWeight::Rows(rows) => rows.len() == raw.n && rows.iter().all(|r| r.len() == raw.n),
        });
        lines.push(CheckLine {
            label: labels::NONLOCAL,
            ok: delta_ok && late == g.points.len() && shapes_ok,
            detail: format!("delta = {} in (0, b = {}); {late} of {} point(s) in [delta, b]", g.delta, raw.b, g.points.len()),
        });
    }
    let scenario = match Scenario::from_raw(&raw) {
        Ok(s) => Some(s),
        Err(ScenarioError::Invalid { label, message }) => {
            if !lines.iter().any(|l| l.label == label && !l.ok) {
                lines.push(CheckLine { label, ok: false, detail: message });
            }
            None
        }
        Err(e) => return config_error(stderr, e),
    };
    if let Some(s) = &scenario {
        let seed = seed_from_env();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 10.0 * (1.0 + s.model.y0().amax());
        let excess = s.nonlinearity.spot_check(s.model.n_modes(), s.model.b(), 1000, scale, &mut rng);
        lines.push(CheckLine {
            label: labels::NONLINEARITY,
            ok: excess <= 1e-12,
            detail: format!("{} sampled: max(|f| - nu) = {excess:.3e} over 1000 samples (seed {seed})", s.nonlinearity.label()),
        });
        lines.push(CheckLine {
            label: labels::CONTROL,
            ok: true,
            detail: format!("{} x {} matrix, norm {:.6e}", s.model.n_modes(), s.model.n_controls(), crate::model::operator_norms(&s.model).m_b),
        });
        match assemble_gramian(&s.model) {
            Ok(gram) => {
                let pac = check_linear_pac(&gram);
                lines.push(CheckLine {
                    label: labels::CONTROLLABILITY,
                    ok: pac.controllable,
                    detail: format!("min Gramian eigenvalue {:.6e}, tolerance {:.3e}", pac.min_eig, pac.rank_tol),
                });
            }
            Err(e) => lines.push(CheckLine { label: labels::CONTROLLABILITY, ok: false, detail: e.to_string() }),
        }
    }
    for l in &lines {
        let _ = writeln!(stdout, "[{}] {}: {}", if l.ok { "ok" } else { "FAIL" }, l.label, l.detail);
    }
    let failed: Vec<&str> = lines.iter().filter(|l| !l.ok).map(|l| l.label).collect();
    if failed.is_empty() {
        EXIT_OK
    } else {
        let _ = writeln!(stderr, "violated: {}", failed.join(", "));
        EXIT_CONFIG
    }
}

fn tabulate_ml(alpha: f64, beta: f64, from: f64, to: f64, step: f64, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    if let Err(e) = MlParams::new(alpha, beta) {
        return config_error(stderr, e);
    }
    if !(step.is_finite() && step != 0.0 && from.is_finite() && to.is_finite()) {
        return config_error(stderr, "from, to and a nonzero step must be finite");
    }
    let span = (to - from) / step;
    let count = if span < -1e-9 { 0 } else { (span + 1e-9).floor() as usize + 1 };
    let xs: Vec<f64> = (0..count).map(|i| from + step * i as f64).collect();
    if let Some(x) = xs.iter().find(|&&x| x > 0.0) {
        return config_error(stderr, format!("arguments must be non-positive, range reaches x = {x}"));
    }
    let mut out = String::from("x,ml\n");
    for x in xs {
        match ml(alpha, beta, x) {
            Ok(v) => {
                let _ = writeln!(out, "{x},{v:.17e}");
            }
            Err(e) => return config_error(stderr, e),
        }
    }
    let _ = stdout.write_all(out.as_bytes());
    EXIT_OK
}
