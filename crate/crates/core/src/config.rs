//! Run configuration.
//!
//! A [`RunConfig`] is a JSON document with a versioned `schema` field. Every
//! field except `schema` and `map` has a default, so the smallest valid
//! config is
//!
//! ```json
//! { "schema": "besov-transfer/1", "map": { "map": "doubling" } }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::besov::{BesovParams, PiecewiseFn};
use crate::dynamics::{MapSpec, SystemOptions};
use crate::grid::{build_grid_with_budget, GridSpec, IntervalUnion, DEFAULT_CELL_BUDGET};
use crate::spectral::{DensityMethod, PERIPHERAL_TOL};
use crate::transfer::{BoundConstants, TransferOptions, DEFAULT_MAX_CELLS};

pub const SCHEMA: &str = "besov-transfer/1";

/// Error of a run, classified by exit status.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("assumption failure: {0}")]
    Assumption(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Assumption(_) => 3,
            RunError::Numeric(_) => 4,
            RunError::Io { .. } => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Validate,
    Ledger,
    Matrix,
    Density,
    Spectrum,
    Decay,
    Clt,
    Ly,
    Bounds,
}

impl Analysis {
    pub const ALL: [Analysis; 9] = [
        Analysis::Validate,
        Analysis::Ledger,
        Analysis::Matrix,
        Analysis::Density,
        Analysis::Spectrum,
        Analysis::Decay,
        Analysis::Clt,
        Analysis::Ly,
        Analysis::Bounds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::Validate => "validate",
            Analysis::Ledger => "ledger",
            Analysis::Matrix => "matrix",
            Analysis::Density => "density",
            Analysis::Spectrum => "spectrum",
            Analysis::Decay => "decay",
            Analysis::Clt => "clt",
            Analysis::Ly => "ly",
            Analysis::Bounds => "bounds",
        }
    }
}

/// Real observable used by the decay and CLT analyses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observable {
    /// `cos(2π n x)`.
    Cos {
        #[serde(default = "one")]
        frequency: u32,
    },
    /// `x`.
    Identity,
    /// Indicator of `[lo, hi)`.
    Indicator { lo: f64, hi: f64 },
}

fn one() -> u32 {
    1
}

impl Default for Observable {
    fn default() -> Self {
        Observable::Cos { frequency: 1 }
    }
}

impl Observable {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Observable::Cos { frequency } => (std::f64::consts::TAU * frequency as f64 * x).cos(),
            Observable::Identity => x,
            Observable::Indicator { lo, hi } => f64::from(u8::from(x >= lo && x < hi)),
        }
    }

    /// Cell averages at `level`.
    pub fn averages(&self, arity: u32, level: u32) -> PiecewiseFn {
        match *self {
            Observable::Indicator { lo, hi } => PiecewiseFn::indicator(arity, level, &IntervalUnion::interval(lo, hi)),
            _ => PiecewiseFn::from_averages(arity, level, |x| self.eval(x)),
        }
    }
}

/// Ledger probing settings; arity and working level come from `grid`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub probe_level: u32,
    pub probe_span: u32,
    pub decomposition_depth: Option<u32>,
    pub allow_non_expanding: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let o = SystemOptions::default();
        ProbeConfig {
            probe_level: o.probe_level,
            probe_span: o.probe_span,
            decomposition_depth: o.decomposition_depth,
            allow_non_expanding: o.allow_non_expanding,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub split_level: u32,
    pub lebesgue_head: usize,
    pub analytic_depth: Option<u32>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        let o = TransferOptions::default();
        TransferConfig { split_level: o.split_level, lebesgue_head: o.lebesgue_head, analytic_depth: o.analytic_depth }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Caps {
    /// Basis cells of the truncated matrix.
    pub max_cells: u64,
    /// Cells of the grid.
    pub grid_cells: u64,
    /// Iterations of the density solver.
    pub max_iter: usize,
    /// Pieces of a step function in the exact density method.
    pub max_pieces: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps { max_cells: DEFAULT_MAX_CELLS, grid_cells: DEFAULT_CELL_BUDGET, max_iter: 100_000, max_pieces: 100_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub density_method: DensityMethod,
    pub density_tol: f64,
    /// Density values at or below this are outside the support.
    pub support_tol: f64,
    pub peripheral_tol: f64,
    pub ly_ensemble: usize,
    pub ly_n_max: usize,
    /// Fail the run when no `λ < 1` fits.
    pub require_ly: bool,
    pub decay_k_max: usize,
    pub observable: Observable,
    /// Positive steps of the perturbed-eigenvalue differences.
    pub clt_steps: Vec<f64>,
    pub mc_samples: usize,
    pub mc_burn_in: usize,
    /// Random tail vectors for the sampled tail norm of the matrix.
    pub tail_samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            density_method: DensityMethod::Power,
            density_tol: 1e-13,
            support_tol: 1e-12,
            peripheral_tol: PERIPHERAL_TOL,
            ly_ensemble: 100,
            ly_n_max: 20,
            require_ly: true,
            decay_k_max: 40,
            observable: Observable::default(),
            clt_steps: vec![0.05, 0.1, 0.2],
            mc_samples: 1_000_000,
            mc_burn_in: 1000,
            tail_samples: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub params: BesovParams,
    pub map: MapSpec,
    #[serde(default = "default_analyses")]
    pub analyses: Vec<Analysis>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub constants: BoundConstants,
    /// Base seed; each randomized analysis derives its own from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub caps: Caps,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_analyses() -> Vec<Analysis> {
    vec![Analysis::Validate, Analysis::Ledger, Analysis::Bounds]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Default settings for `map`.
    pub fn new(map: MapSpec) -> Self {
        RunConfig {
            schema: SCHEMA.into(),
            grid: GridSpec::default(),
            params: BesovParams::default(),
            map,
            analyses: default_analyses(),
            output: default_output(),
            constants: BoundConstants::default(),
            seed: 0,
            caps: Caps::default(),
            probe: ProbeConfig::default(),
            transfer: TransferConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }

    pub fn with_level(mut self, level: u32) -> Self {
        self.grid.max_level = level;
        self
    }

    pub fn with_analyses(mut self, analyses: &[Analysis]) -> Self {
        self.analyses = analyses.to_vec();
        self
    }

    /// Parses and validates; parse errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            RunError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|source| RunError::Io { path: path.into(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Structural checks, then the standing parameter inequalities.
    pub fn validate(&self) -> Result<(), RunError> {
        if self.schema != SCHEMA {
            return Err(RunError::Config(format!("at `schema`: expected {SCHEMA:?}, found {:?}", self.schema)));
        }
        build_grid_with_budget(self.grid.arity, self.grid.max_level, self.caps.grid_cells)
            .map_err(|e| RunError::Config(format!("at `grid`: {e}")))?;
        if self.transfer.split_level > self.grid.max_level {
            return Err(RunError::Config(format!(
                "at `transfer.split_level`: {} exceeds grid.max_level {}",
                self.transfer.split_level, self.grid.max_level
            )));
        }
        let a = &self.analysis;
        if !(a.density_tol > 0.0) {
            return Err(RunError::Config("at `analysis.density_tol`: must be positive".into()));
        }
        if a.ly_n_max < 2 || a.ly_ensemble == 0 {
            return Err(RunError::Config("at `analysis`: ly_n_max must be at least 2 and ly_ensemble positive".into()));
        }
        if !a.clt_steps.iter().any(|&t| t > 0.0) {
            return Err(RunError::Config("at `analysis.clt_steps`: needs a positive step".into()));
        }
        if let Observable::Indicator { lo, hi } = a.observable {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(RunError::Config("at `analysis.observable`: need 0 ≤ lo < hi ≤ 1".into()));
            }
        }
        self.params.validate().map_err(|e| RunError::Assumption(format!("at `params`: {e}")))
    }

    pub fn system_options(&self) -> SystemOptions {
        SystemOptions {
            arity: self.grid.arity,
            working_level: self.grid.max_level,
            probe_level: self.probe.probe_level,
            probe_span: self.probe.probe_span,
            decomposition_depth: self.probe.decomposition_depth,
            allow_non_expanding: self.probe.allow_non_expanding,
        }
    }

    pub fn transfer_options(&self) -> TransferOptions {
        TransferOptions {
            split_level: self.transfer.split_level,
            constants: self.constants,
            analytic_depth: self.transfer.analytic_depth,
            lebesgue_head: self.transfer.lebesgue_head,
            max_cells: self.caps.max_cells,
            cross_check: true,
        }
    }

    /// Requested analyses in dependency order, deduplicated.
    pub fn ordered_analyses(&self) -> Vec<Analysis> {
        let mut out = self.analyses.clone();
        out.sort();
        out.dedup();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let c = RunConfig::from_json(r#"{"schema": "besov-transfer/1", "map": {"map": "doubling"}}"#).unwrap();
        assert_eq!(c.grid, GridSpec { arity: 2, max_level: 10 });
        assert_eq!(c.params, BesovParams::default());
    }

    #[test]
    fn roundtrip() {
        let c = RunConfig::new(MapSpec::golden()).with_analyses(&[Analysis::Spectrum, Analysis::Density]);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_field_names_path() {
        let e = RunConfig::from_json(r#"{"schema": "besov-transfer/1", "map": {"map": "doubling"}, "caps": {"max_cell": 3}}"#)
            .unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("caps"), "{e}");
    }

    #[test]
    fn parameter_violation_is_assumption_failure() {
        let e = RunConfig::from_json(
            r#"{"schema": "besov-transfer/1", "map": {"map": "doubling"},
                "params": {"s": 0.45, "p": 2, "q": 2, "beta": 0.47, "eps": 0.1, "delta": 0.05, "gamma": 0.5}}"#,
        )
        .unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("0 < s+ε ≤ 1/p"), "{e}");
    }

    #[test]
    fn analyses_are_ordered() {
        let c = RunConfig::new(MapSpec::doubling()).with_analyses(&[Analysis::Bounds, Analysis::Density, Analysis::Ledger]);
        assert_eq!(c.ordered_analyses(), vec![Analysis::Ledger, Analysis::Density, Analysis::Bounds]);
    }
}
