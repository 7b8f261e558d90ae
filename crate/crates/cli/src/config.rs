//! Run configuration: a JSON document, optionally layered over a preset.

use std::path::{Path, PathBuf};

use ocn::solver::{Method, StepControl, StepMode};
use ocn::systems::{preset, Domain, Preset, System};
use ocn::train::{LossSpec, Objective, OptimizerKind, OptimizerSpec, SolverSpec, TrainConfig};
use ocn::{FieldMode, OcnError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: Option<String>,
    pub domain: Option<Domain>,
    pub m: Option<usize>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub dims: Option<Vec<usize>>,
    pub mode: Option<FieldMode>,
    /// Initialisation seed; defaults to the system seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_len: usize,
    pub loss: LossSpec,
    pub optimizer: OptimizerSection,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection { batch_len: 2, loss: LossSpec::Standard, optimizer: OptimizerSection::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub eta: Option<f64>,
    #[serde(rename = "K")]
    pub iterations: usize,
    pub threshold: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub memory: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerSpec::default();
        OptimizerSection {
            kind: d.kind,
            eta: None,
            iterations: d.iterations,
            threshold: None,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            memory: d.memory,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub method: Method,
    /// `adaptive` or `fixed`.
    pub mode: String,
    pub rtol: f64,
    pub atol: f64,
    pub h: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection { method: Method::Dopri5, mode: "adaptive".into(), rtol: 1e-6, atol: 1e-8, h: None }
    }
}

impl SolverSection {
    pub fn to_spec(&self) -> Result<SolverSpec> {
        let mode = match self.mode.as_str() {
            "adaptive" => StepMode::Adaptive { rtol: self.rtol, atol: self.atol },
            "fixed" => match self.h {
                Some(h) => StepMode::Fixed { h },
                None => return cfg_err("fixed solver mode needs h"),
            },
            other => return cfg_err(format!("unknown solver mode '{other}'")),
        };
        let spec = SolverSpec { method: self.method, control: StepControl { mode, ..StepControl::default() } };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub emit_csv: bool,
    pub emit_plots_data: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { directory: PathBuf::from("out"), emit_csv: true, emit_plots_data: true }
    }
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(OcnError::Config(msg.into()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OcnError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| OcnError::Config(format!("invalid config: {e}")))
    }
}

/// A configuration with every section filled in and checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub experiment: Preset,
    pub train: TrainConfig,
    pub output: OutputSection,
}

/// Merges `cfg` over the preset named by `preset_flag` or `cfg.preset`.
/// `seed` overrides both the sampling and initialisation seeds.
pub fn resolve(cfg: &RunConfig, preset_flag: Option<&str>, seed: Option<u64>) -> Result<Resolved> {
    let base = match preset_flag.or(cfg.preset.as_deref()) {
        Some(name) => Some(preset(name)?),
        None => None,
    };
    let s = &cfg.system;
    let name = match (&s.name, &base) {
        (Some(n), _) => n.clone(),
        (None, Some(b)) => b.system.name().to_string(),
        (None, None) => return cfg_err("no system given: pass --preset or set system.name"),
    };
    let system = System::from_name(&name)?;
    let pick = |v: Option<f64>, b: Option<f64>, what: &str| v.or(b).ok_or_else(|| OcnError::Config(format!("system.{what} is required")));
    let domain = s.domain.clone().or(base.as_ref().map(|b| b.domain.clone())).ok_or_else(|| OcnError::Config("system.domain is required".into()))?;
    if domain.dim() != system.dim() {
        return cfg_err(format!("domain has dimension {}, {name} has {}", domain.dim(), system.dim()));
    }
    let m = s.m.or(base.as_ref().map(|b| b.m)).ok_or_else(|| OcnError::Config("system.m is required".into()))?;
    let horizon = pick(s.horizon, base.as_ref().map(|b| b.horizon), "T")?;
    let dt = pick(s.dt, base.as_ref().map(|b| b.dt), "dt")?;
    let sample_seed = seed.or(s.seed).or(base.as_ref().map(|b| b.seed)).unwrap_or(0);
    let n = &cfg.network;
    let dims = n.dims.clone().or(base.as_ref().map(|b| b.dims.clone())).ok_or_else(|| OcnError::Config("network.dims is required".into()))?;
    let mode = n.mode.or(base.as_ref().map(|b| b.mode)).ok_or_else(|| OcnError::Config("network.mode is required".into()))?;
    if dims.first() != Some(&system.dim()) {
        return cfg_err(format!("network input width must equal the state dimension {}", system.dim()));
    }
    let expected_out = match mode {
        FieldMode::Scalar => 1,
        FieldMode::Vector => system.dim(),
    };
    if dims.last() != Some(&expected_out) {
        return cfg_err(format!("{} mode needs output width {expected_out}", mode.as_str()));
    }
    let experiment = Preset {
        name: base.as_ref().map_or("custom", |b| b.name),
        system,
        domain,
        m,
        horizon,
        dt,
        seed: sample_seed,
        dims: dims.clone(),
        mode,
    };
    let o = &cfg.training.optimizer;
    let default_eta = OptimizerSpec::default().eta;
    let optimizer = OptimizerSpec {
        kind: o.kind,
        eta: o.eta.unwrap_or(if o.kind == OptimizerKind::Lbfgs { 1.0 } else { default_eta }),
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        iterations: o.iterations,
        memory: o.memory,
    };
    let train = TrainConfig {
        dims,
        mode,
        objective: Objective {
            loss: cfg.training.loss,
            batch_len: cfg.training.batch_len,
            solver: cfg.solver.to_spec()?,
        },
        optimizer,
        seed: seed.or(n.seed).unwrap_or(sample_seed),
        threshold: o.threshold,
        log_every: 0,
    };
    train.validate()?;
    if !(dt > 0.0 && horizon > 0.0) {
        return cfg_err("T and dt must be positive");
    }
    Ok(Resolved { experiment, train, output: cfg.output.clone() })
}
