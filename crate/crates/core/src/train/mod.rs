//! Multi-trajectory loss, its co-state gradient, and the optimisation loop.

mod dataset;
mod loss;
mod optim;

pub use dataset::{Dataset, DatasetMeta, GeneratorInfo, Trajectory};
pub use loss::{batch_split, loss_and_gradient, loss_only, LossSpec, Objective, SolverSpec};
pub use optim::{
    lbfgs_step, optimizer_step, LbfgsMemory, LbfgsOutcome, OptimizerKind, OptimizerSpec, OptimizerState,
};

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{config, OcnError, Result};
use crate::field::{FieldMode, MlpField, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dims: Vec<usize>,
    pub mode: FieldMode,
    pub objective: Objective,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    /// Stop once `J` drops to this value; `None` means `1e-8` per residual point.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Report every this many iterations to the progress callback (0 = never).
    #[serde(default)]
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(dims: &[usize], mode: FieldMode) -> Self {
        TrainConfig {
            dims: dims.to_vec(),
            mode,
            objective: Objective::default(),
            optimizer: OptimizerSpec::default(),
            seed: 0,
            threshold: None,
            log_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.optimizer.validate()?;
        if let Some(t) = self.threshold {
            if !(t >= 0.0) {
                return config("threshold must be nonnegative");
            }
        }
        Ok(())
    }

    pub fn threshold_for(&self, ds: &Dataset) -> f64 {
        self.threshold.unwrap_or(1e-8 * ds.residual_points() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    Threshold,
    /// The line search could not decrease the loss.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: MlpField,
    pub history: Vec<HistoryEntry>,
    pub final_loss: f64,
    pub stop: StopReason,
}

#[derive(Clone, Copy)]
struct Clock {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Clock {
    fn start() -> Self {
        Clock {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn ms(&self) -> u64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_millis() as u64
        }
        #[cfg(target_arch = "wasm32")]
        {
            0
        }
    }
}

/// Incremental trainer: each [`Trainer::step`] records the current loss and
/// applies one optimiser update.
pub struct Trainer<'a> {
    dataset: Cow<'a, Dataset>,
    objective: Objective,
    spec: OptimizerSpec,
    field: MlpField,
    state: OptimizerState,
    current: (f64, ParamVector),
    threshold: f64,
    iteration: usize,
    clock: Clock,
    history: Vec<HistoryEntry>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, ds: &'a Dataset) -> Result<Self> {
        let field = MlpField::init(&cfg.dims, cfg.mode, cfg.seed)?;
        Trainer::with_field(cfg, ds, field)
    }

    /// Starts from an existing field instead of a fresh initialisation.
    pub fn with_field(cfg: &TrainConfig, ds: &'a Dataset, field: MlpField) -> Result<Self> {
        Trainer::build(cfg, Cow::Borrowed(ds), field)
    }

    /// A trainer that owns its dataset.
    pub fn owned(cfg: &TrainConfig, ds: Dataset, field: MlpField) -> Result<Trainer<'static>> {
        Trainer::build(cfg, Cow::Owned(ds), field)
    }

    fn build(cfg: &TrainConfig, ds: Cow<'a, Dataset>, field: MlpField) -> Result<Self> {
        cfg.validate()?;
        if field.dims() != cfg.dims.as_slice() || field.mode() != cfg.mode {
            return config("field architecture does not match the configuration");
        }
        let current = loss_and_gradient(&field, &ds, &cfg.objective)?;
        let threshold = cfg.threshold_for(&ds);
        Ok(Trainer {
            dataset: ds,
            objective: cfg.objective,
            spec: cfg.optimizer,
            state: OptimizerState::new(&cfg.optimizer, field.num_params()),
            field,
            current,
            threshold,
            iteration: 0,
            clock: Clock::start(),
            history: Vec::new(),
        })
    }

    pub fn field(&self) -> &MlpField {
        &self.field
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn loss(&self) -> f64 {
        self.current.0
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// Records the loss at the current parameters, then updates them unless
    /// the threshold is met. Returns `Some` when training should stop.
    pub fn step(&mut self) -> Result<Option<StopReason>> {
        let it = self.iteration;
        self.step_inner().map_err(|e| OcnError::AtIteration { iteration: it, source: Box::new(e) })
    }

    /// Debug builds: the bilinear invariant must hold on the first interval
    /// under the current parameters.
    #[cfg(debug_assertions)]
    fn spot_check_invariant(&self) -> Result<()> {
        let Some(tr) = self.dataset.trajectories.first() else { return Ok(()) };
        let (t0, dt) = (tr.t0, self.dataset.dt);
        let tab = self.objective.solver.method.tableau();
        let tape = crate::solver::integrate_forward(&self.field, &tr.states[0], (t0, t0 + dt), &tab, &self.objective.solver.control)?;
        let d = self.field.dim();
        let p: Vec<f64> = (0..d).map(|i| 1.0 / (i + 1) as f64).collect();
        let q: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
        let drift = crate::diag::invariant_drift(&tape, &self.field, &p, &q)?;
        debug_assert!(drift <= 1e-10, "bilinear invariant drifted by {drift:e}");
        Ok(())
    }

    fn step_inner(&mut self) -> Result<Option<StopReason>> {
        let (j, g) = (self.current.0, self.current.1.clone());
        let g = &g;
        self.history.push(HistoryEntry {
            iteration: self.iteration,
            loss: j,
            grad_norm: g.norm(),
            wall_ms: self.clock.ms(),
        });
        #[cfg(debug_assertions)]
        self.spot_check_invariant()?;
        if j <= self.threshold {
            return Ok(Some(StopReason::Threshold));
        }
        if !g.is_finite() {
            return Err(OcnError::NumericInput("non-finite gradient".into()));
        }
        let mut params = self.field.get_params().into_inner();
        match &mut self.state {
            OptimizerState::Lbfgs(mem) => {
                let (field, ds, obj) = (&self.field, &*self.dataset, &self.objective);
                let mut trial = field.clone();
                let mut objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
                    trial.set_params(ParamVector(p.to_vec()))?;
                    let (j, g) = loss_and_gradient(&trial, ds, obj)?;
                    Ok((j, g.into_inner()))
                };
                match lbfgs_step(&params, j, g.as_slice(), mem, &self.spec, &mut objective)? {
                    LbfgsOutcome::Moved { params, loss, grad } => {
                        self.field.set_params(ParamVector(params))?;
                        self.current = (loss, ParamVector(grad));
                    }
                    LbfgsOutcome::Stalled => {
                        self.iteration += 1;
                        return Ok(Some(StopReason::Stalled));
                    }
                }
            }
            state => {
                optimizer_step(&mut params, g.as_slice(), state, &self.spec)?;
                self.field.set_params(ParamVector(params))?;
                self.current = loss_and_gradient(&self.field, &self.dataset, &self.objective)?;
            }
        }
        self.iteration += 1;
        Ok(None)
    }

    pub fn finish(self, stop: StopReason) -> TrainOutcome {
        TrainOutcome { field: self.field, history: self.history, final_loss: self.current.0, stop }
    }
}

/// Runs up to `K` optimiser iterations from a seeded initialisation.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, None, |_| {})
}

/// As [`train`], optionally warm-started, calling `progress` every
/// `log_every` iterations.
pub fn train_with(
    cfg: &TrainConfig,
    ds: &Dataset,
    init: Option<MlpField>,
    mut progress: impl FnMut(&HistoryEntry),
) -> Result<TrainOutcome> {
    let field = match init {
        Some(f) => f,
        None => MlpField::init(&cfg.dims, cfg.mode, cfg.seed)?,
    };
    if cfg.optimizer.iterations == 0 {
        cfg.validate()?;
        let final_loss = loss_only(&field, ds, &cfg.objective)?;
        return Ok(TrainOutcome { field, history: Vec::new(), final_loss, stop: StopReason::Budget });
    }
    let mut tr = Trainer::with_field(cfg, ds, field)?;
    for _ in 0..cfg.optimizer.iterations {
        let stop = tr.step()?;
        if cfg.log_every > 0 && (tr.iteration() % cfg.log_every == 0 || stop.is_some()) {
            progress(tr.history.last().unwrap());
        }
        if let Some(s) = stop {
            return Ok(tr.finish(s));
        }
    }
    Ok(tr.finish(StopReason::Budget))
}
