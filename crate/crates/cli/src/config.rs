//! Run configuration: one TOML document, unknown keys rejected, defaults
//! written back in full when a run starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dualflow_core::anomaly::Strategy;
use dualflow_core::field::MlpConfig;
use dualflow_core::objectives::DfmVariant;
use dualflow_core::ode::{Method, SolverConfig};
use dualflow_core::optim::AdamConfig;
use dualflow_core::paths::PathSpec;
use dualflow_core::trace::{ProbeDist, TraceEstimator};
use dualflow_core::train::{Objective, TrainConfig, DFM_FINAL_INIT_SCALE};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveName {
    Mle,
    Fm,
    Icfm,
    Rectified,
    Vptrig,
    Dfm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub objective: ObjectiveName,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub path: PathParams,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub eval: EvalParams,
    #[serde(default)]
    pub dfm: DfmParams,
    pub data: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathParams {
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_icfm_sigma")]
    pub sigma: f64,
}

fn default_sigma_min() -> f64 {
    PathSpec::DEFAULT_SIGMA_MIN
}

fn default_icfm_sigma() -> f64 {
    PathSpec::DEFAULT_ICFM_SIGMA
}

impl Default for PathParams {
    fn default() -> Self {
        Self {
            sigma_min: PathSpec::DEFAULT_SIGMA_MIN,
            sigma: PathSpec::DEFAULT_ICFM_SIGMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_time_embed")]
    pub time_embed: usize,
    /// Defaults to zero, or to a small nonzero value for DFM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_init_scale: Option<f64>,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_time_embed() -> usize {
    8
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            time_embed: default_time_embed(),
            final_init_scale: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverParams {
    Euler {
        #[serde(default = "default_euler_steps")]
        steps: usize,
    },
    Dopri5 {
        #[serde(default = "default_atol")]
        atol: f64,
        #[serde(default = "default_rtol")]
        rtol: f64,
        #[serde(default = "default_max_steps")]
        max_steps: usize,
    },
}

fn default_euler_steps() -> usize {
    4
}

fn default_atol() -> f64 {
    1e-1
}

fn default_rtol() -> f64 {
    1e-2
}

fn default_max_steps() -> usize {
    SolverConfig::DEFAULT_MAX_STEPS
}

impl Default for SolverParams {
    fn default() -> Self {
        Self::Euler { steps: 4 }
    }
}

impl SolverParams {
    pub fn to_solver(self) -> SolverConfig {
        let method = match self {
            Self::Euler { steps } => Method::Euler { steps },
            Self::Dopri5 {
                atol,
                rtol,
                max_steps,
            } => Method::Dopri5 {
                atol,
                rtol,
                max_steps,
            },
        };
        SolverConfig {
            method,
            t_start: 0.0,
            t_end: 1.0,
        }
    }

    /// `F` for fixed-step, `V` for variable-step evaluation.
    pub fn tag(self) -> &'static str {
        match self {
            Self::Euler { .. } => "F",
            Self::Dopri5 { .. } => "V",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Exact,
    Hutchinson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeName {
    Rademacher,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceParams {
    #[serde(default = "default_trace")]
    pub trace: TraceKind,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_probe_dist")]
    pub probe_dist: ProbeName,
}

fn default_trace() -> TraceKind {
    TraceKind::Hutchinson
}

fn default_probes() -> usize {
    1
}

fn default_probe_dist() -> ProbeName {
    ProbeName::Rademacher
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            trace: default_trace(),
            probes: default_probes(),
            probe_dist: default_probe_dist(),
        }
    }
}

impl TraceParams {
    pub fn estimator(&self, seed: u64) -> TraceEstimator {
        match self.trace {
            TraceKind::Exact => TraceEstimator::Exact,
            TraceKind::Hutchinson => TraceEstimator::Hutchinson {
                probes: self.probes,
                dist: match self.probe_dist {
                    ProbeName::Rademacher => ProbeDist::Rademacher,
                    ProbeName::Gaussian => ProbeDist::Gaussian,
                },
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Solver for the MLE objective; must be fixed-step.
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub trace: TraceParams,
    /// Refit the prior to the pulled-back training data after training.
    #[serde(default = "default_true")]
    pub calibrate_prior: bool,
}

fn default_steps() -> usize {
    2000
}

fn default_batch() -> usize {
    256
}

fn default_lr() -> f64 {
    1e-3
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_true() -> bool {
    true
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            batch_size: default_batch(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            solver: SolverParams::default(),
            trace: TraceParams::default(),
            calibrate_prior: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    ReverseModel,
    ForwardModel,
}

impl From<StrategyName> for Strategy {
    fn from(s: StrategyName) -> Self {
        match s {
            StrategyName::ReverseModel => Strategy::ReverseModel,
            StrategyName::ForwardModel => Strategy::ForwardModel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalParams {
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub trace: TraceParams,
    /// Defaults to the reverse model for DFM and the forward model otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyName>,
    #[serde(default)]
    pub point_adjust: bool,
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

fn default_chunk() -> usize {
    1024
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            solver: SolverParams::default(),
            trace: TraceParams::default(),
            strategy: None,
            point_adjust: false,
            chunk: default_chunk(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfmVariantName {
    CosPair,
    CosProductOnes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfmParams {
    #[serde(default = "default_variant")]
    pub variant: DfmVariantName,
}

fn default_variant() -> DfmVariantName {
    DfmVariantName::CosPair
}

impl Default for DfmParams {
    fn default() -> Self {
        Self {
            variant: default_variant(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    TwoMoons {
        #[serde(default = "default_moons_n")]
        n: usize,
        #[serde(default = "default_moons_noise")]
        noise: f64,
    },
    Telemetry {
        #[serde(default = "default_length")]
        length: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default = "default_rate")]
        anomaly_rate: f64,
        /// Leading, anomaly-free share of the series used for training.
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(default = "default_window")]
        window: usize,
    },
    Files {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default = "default_window")]
        window: usize,
    },
}

fn default_moons_n() -> usize {
    10_000
}

fn default_moons_noise() -> f64 {
    0.05
}

fn default_length() -> usize {
    20_000
}

fn default_channels() -> usize {
    5
}

fn default_rate() -> f64 {
    0.05
}

fn default_train_fraction() -> f64 {
    0.6
}

fn default_window() -> usize {
    8
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Resolves objective-dependent defaults so the written copy is explicit.
    pub fn fill_defaults(&mut self) {
        let dual = self.objective == ObjectiveName::Dfm;
        self.model.final_init_scale.get_or_insert(if dual {
            DFM_FINAL_INIT_SCALE
        } else {
            0.0
        });
        self.eval.strategy.get_or_insert(if dual {
            StrategyName::ReverseModel
        } else {
            StrategyName::ForwardModel
        });
    }

    pub fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveName::Mle => Objective::Mle,
            ObjectiveName::Fm => Objective::Cfm(PathSpec::Fm {
                sigma_min: self.path.sigma_min,
            }),
            ObjectiveName::Icfm => Objective::Cfm(PathSpec::Icfm {
                sigma: self.path.sigma,
            }),
            ObjectiveName::Rectified => Objective::Cfm(PathSpec::Rectified),
            ObjectiveName::Vptrig => Objective::Cfm(PathSpec::VpTrig),
            ObjectiveName::Dfm => Objective::Dfm(match self.dfm.variant {
                DfmVariantName::CosPair => DfmVariant::CosPair,
                DfmVariantName::CosProductOnes => DfmVariant::CosProductOnes,
            }),
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.eval
            .strategy
            .map(Strategy::from)
            .unwrap_or(if self.objective == ObjectiveName::Dfm {
                Strategy::ReverseModel
            } else {
                Strategy::ForwardModel
            })
    }

    pub fn model_config(&self, dim: usize) -> MlpConfig {
        MlpConfig {
            dim,
            hidden: self.model.hidden.clone(),
            time_embed: self.model.time_embed,
            final_init_scale: self.model.final_init_scale.unwrap_or(0.0),
        }
    }

    pub fn train_config(&self, dim: usize) -> TrainConfig {
        let objective = self.objective();
        let mut cfg = TrainConfig::new(objective, dim);
        cfg.model = self.model_config(dim);
        cfg.steps = self.train.steps;
        cfg.batch_size = self.train.batch_size;
        cfg.adam = AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            ..AdamConfig::default()
        };
        cfg.seed = self.seed;
        cfg.train_solver = self.train.solver.to_solver();
        cfg.trace = self.train.trace.estimator(self.seed);
        cfg.strategy = self.strategy();
        cfg.calibrate_prior = (self.train.calibrate_prior && objective != Objective::Mle)
            .then(|| self.eval.solver.to_solver());
        cfg
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.objective == ObjectiveName::Mle
            && !matches!(self.train.solver, SolverParams::Euler { .. })
        {
            return Err(CliError::Config("training requires fixed-step solver".into()));
        }
        if self.eval.chunk == 0 {
            return Err(CliError::Config("eval.chunk must be positive".into()));
        }
        match &self.data {
            DataSource::TwoMoons { n, noise } => {
                if *n == 0 || noise.is_nan() || *noise < 0.0 {
                    return Err(CliError::Config("two_moons needs n ≥ 1 and noise ≥ 0".into()));
                }
            }
            DataSource::Telemetry {
                train_fraction,
                window,
                ..
            } => {
                if !(0.0 < *train_fraction && *train_fraction < 1.0) {
                    return Err(CliError::Config("train_fraction must lie in (0, 1)".into()));
                }
                if *window == 0 {
                    return Err(CliError::Config("window must be at least 1".into()));
                }
            }
            DataSource::Files { window, .. } => {
                if *window == 0 {
                    return Err(CliError::Config("window must be at least 1".into()));
                }
            }
        }
        // Dimension does not affect the remaining checks.
        self.train_config(2)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.eval
            .solver
            .to_solver()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.eval
            .trace
            .estimator(0)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }
}
