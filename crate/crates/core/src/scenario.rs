//! JSON scenario files.
//!
//! ```json
//! {
//!   "q": 0.6667, "b": 1.0, "N": 6,
//!   "lambda": "heat1d",
//!   "B": "example1",
//!   "pi_set": [1, 2, 3],
//!   "y0": [1.0, 0.5, -0.5, 0.25, 0.0, 0.1],
//!   "yb": [0.3, -0.2, 0.1],
//!   "g": { "delta": 0.5, "points": [{ "t": 0.6, "c": 0.1 }] },
//!   "f": { "kind": "sine", "params": { "amplitude": 0.5, "omega": 3.0 } },
//!   "grid": { "T": 512 }
//! }
//! ```
//!
//! `lambda` is either `"heat1d"` (`λ_k = k²`) or a list of `N` values; `B` is
//! either `"example1"` or a list of `N` rows. `g`, `f` and `grid` are
//! optional. A weight `c` is a number or an `N × N` list of rows. Nonlinearity
//! kinds: `zero`, `sine` (`amplitude`, `omega`), `saturating` (`amplitude`),
//! `constant` (`vector`).

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::model::{
    example1_control_matrix, heat1d_eigenvalues, ModelError, NonlinearitySpec, NonlocalPoint, NonlocalSpec,
    SpectralModel, Weight,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{label}: {message}")]
    Invalid { label: &'static str, message: String },
}

impl ScenarioError {
    fn invalid(label: &'static str, message: impl Into<String>) -> Self {
        ScenarioError::Invalid { label, message: message.into() }
    }
}

/// Checklist label for each class of scenario defect.
pub mod labels {
    pub const ORDER: &str = "order";
    pub const HORIZON: &str = "horizon";
    pub const SPECTRUM: &str = "spectrum";
    pub const CONTROL: &str = "control-operator";
    pub const TARGET: &str = "target";
    pub const DATA: &str = "data";
    pub const NONLOCAL: &str = "nonlocal-support";
    pub const NONLINEARITY: &str = "nonlinearity-bound";
    pub const CONTROLLABILITY: &str = "controllability";
    pub const GRID: &str = "grid";
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RawSeq {
    Named(String),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RawMatrix {
    Named(String),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RawWeight {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPoint {
    pub t: f64,
    pub c: RawWeight,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawNonlocal {
    pub delta: f64,
    #[serde(default)]
    pub points: Vec<RawPoint>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawNonlinearity {
    pub kind: String,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGrid {
    #[serde(rename = "T")]
    pub steps: usize,
}

/// The file contents before any validation.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawScenario {
    pub q: f64,
    pub b: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub lambda: RawSeq,
    #[serde(rename = "B")]
    pub control: RawMatrix,
    pub pi_set: Vec<usize>,
    pub y0: Vec<f64>,
    pub yb: Vec<f64>,
    #[serde(default)]
    pub g: Option<RawNonlocal>,
    #[serde(default)]
    pub f: Option<RawNonlinearity>,
    #[serde(default)]
    pub grid: Option<RawGrid>,
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: SpectralModel,
    pub nonlocal: NonlocalSpec,
    pub nonlinearity: NonlinearitySpec,
    pub grid_t: Option<usize>,
}

pub fn read_raw(path: &Path) -> Result<RawScenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    Ok(serde_json::from_str(&text)?)
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_raw(&read_raw(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Self::from_raw(&serde_json::from_str(text)?)
    }

    pub fn from_raw(raw: &RawScenario) -> Result<Self, ScenarioError> {
        let n = raw.n;
        let lambda = match &raw.lambda {
            RawSeq::Named(name) if name == "heat1d" => heat1d_eigenvalues(n),
            RawSeq::Named(name) => return Err(ScenarioError::invalid(labels::SPECTRUM, format!("unknown spectrum preset {name:?}"))),
            RawSeq::Values(v) if v.len() == n => DVector::from_column_slice(v),
            RawSeq::Values(v) => return Err(ScenarioError::invalid(labels::SPECTRUM, format!("expected {n} eigenvalues, got {}", v.len()))),
        };
        let bmat = match &raw.control {
            RawMatrix::Named(name) if name == "example1" => {
                if n < 2 {
                    return Err(ScenarioError::invalid(labels::CONTROL, "the example1 operator needs N >= 2"));
                }
                example1_control_matrix(n)
            }
            RawMatrix::Named(name) => return Err(ScenarioError::invalid(labels::CONTROL, format!("unknown control preset {name:?}"))),
            RawMatrix::Rows(rows) => matrix_from_rows(rows, n, None).map_err(|m| ScenarioError::invalid(labels::CONTROL, m))?,
        };
        let model = SpectralModel::new(
            raw.q,
            raw.b,
            lambda,
            bmat,
            &raw.pi_set,
            DVector::from_column_slice(&raw.y0),
            DVector::from_column_slice(&raw.yb),
        )
        .map_err(model_error)?;
        let nonlocal = match &raw.g {
            None => NonlocalSpec::none(&model),
            Some(g) => {
                let mut points = Vec::with_capacity(g.points.len());
                for p in &g.points {
                    let weight = match &p.c {
                        RawWeight::Scalar(c) => Weight::Scalar(*c),
                        RawWeight::Rows(rows) => Weight::Matrix(
                            matrix_from_rows(rows, n, Some(n)).map_err(|m| ScenarioError::invalid(labels::NONLOCAL, m))?,
                        ),
                    };
                    points.push(NonlocalPoint { t: p.t, weight });
                }
                NonlocalSpec::new(g.delta, points, &model).map_err(model_error)?
            }
        };
        let nonlinearity = match &raw.f {
            None => NonlinearitySpec::zero(),
            Some(f) => nonlinearity(f, n)?,
        };
        let grid_t = raw.grid.as_ref().map(|g| g.steps);
        if let Some(t) = grid_t {
            if t < 8 {
                return Err(ScenarioError::invalid(labels::GRID, format!("grid T must be at least 8, got {t}")));
            }
        }
        Ok(Self { model, nonlocal, nonlinearity, grid_t })
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], n_rows: usize, n_cols: Option<usize>) -> Result<DMatrix<f64>, String> {
    if rows.len() != n_rows {
        return Err(format!("expected {n_rows} rows, got {}", rows.len()));
    }
    let cols = n_cols.unwrap_or_else(|| rows.first().map_or(0, Vec::len));
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(format!("every row must have {cols} > 0 entries"));
    }
    Ok(DMatrix::from_fn(n_rows, cols, |i, j| rows[i][j]))
}

fn model_error(e: ModelError) -> ScenarioError {
    let label = match &e {
        ModelError::Order(_) => labels::ORDER,
        ModelError::Horizon(_) => labels::HORIZON,
        ModelError::Empty { .. } | ModelError::Eigenvalue { .. } => labels::SPECTRUM,
        ModelError::Projection(_) => labels::TARGET,
        ModelError::Dimension { what, .. } if what.contains("control") => labels::CONTROL,
        ModelError::Dimension { what, .. } if what.contains("nonlocal") => labels::NONLOCAL,
        ModelError::Delta { .. } | ModelError::PointBeforeDelta { .. } | ModelError::PointAfterHorizon { .. } => labels::NONLOCAL,
        ModelError::NonFinite(what) if what.contains("control") => labels::CONTROL,
        ModelError::NonFinite(what) if what.contains("nonlocal") => labels::NONLOCAL,
        _ => labels::DATA,
    };
    ScenarioError::invalid(label, e.to_string())
}

fn param(f: &RawNonlinearity, key: &str) -> Result<f64, ScenarioError> {
    f.params
        .get(key)
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| ScenarioError::invalid(labels::NONLINEARITY, format!("{} needs a numeric parameter {key:?}", f.kind)))
}

fn nonlinearity(f: &RawNonlinearity, n: usize) -> Result<NonlinearitySpec, ScenarioError> {
    match f.kind.as_str() {
        "zero" => Ok(NonlinearitySpec::zero()),
        "sine" => Ok(NonlinearitySpec::sine(n, param(f, "amplitude")?, param(f, "omega")?)),
        "saturating" => Ok(NonlinearitySpec::saturating(param(f, "amplitude")?)),
        "constant" => {
            let v: Vec<f64> = f
                .params
                .get("vector")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .ok_or_else(|| ScenarioError::invalid(labels::NONLINEARITY, "constant needs a numeric list \"vector\""))?;
            if v.len() != n {
                return Err(ScenarioError::invalid(labels::NONLINEARITY, format!("constant vector needs {n} entries, got {}", v.len())));
            }
            Ok(NonlinearitySpec::constant(DVector::from_vec(v)))
        }
        other => Err(ScenarioError::invalid(labels::NONLINEARITY, format!("unknown nonlinearity kind {other:?}"))),
    }
}
