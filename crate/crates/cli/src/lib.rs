//! Subcommands behind the `ocn` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use ocn::diag::{
    bound_ratio, compare_flows, fd_gradient_check_with, field_error, invariant_drift, Comparison, DiagnosticsReport,
    GradFn, GRID_REFINEMENT,
};
use ocn::io::{fmt_f64, load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_history_csv};
use ocn::solver::{integrate_fixed, Method};
use ocn::systems::{generate_dataset, generator_control, sample_initials, Domain, System};
use ocn::train::{loss_and_gradient, loss_only, train_with, Dataset, LossSpec, Objective, SolverSpec, StopReason};
use ocn::{FieldMode, MlpField, OcnError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{resolve, Resolved, RunConfig};

/// Inputs shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<Resolved> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        resolve(&cfg, self.preset.as_deref(), self.seed)
    }

    fn out_dir(&self, r: Option<&Resolved>) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or(r.map(|r| r.output.directory.clone()))
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

/// Whether a command's own checks passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

pub fn cmd_generate(c: &Common) -> Result<PathBuf> {
    let r = c.resolve()?;
    let dir = c.out_dir(Some(&r))?;
    let ds = r.experiment.generate()?;
    let path = dir.join("dataset.csv");
    save_dataset(&ds, &path)?;
    eprintln!("wrote {} trajectories x {} samples to {}", ds.len(), ds.intervals() + 1, path.display());
    Ok(path)
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub dataset: Option<PathBuf>,
    /// Warm start from this checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Override the iteration budget.
    pub iterations: Option<usize>,
    /// Write zeros in the `wall_ms` column so repeated runs are byte-identical.
    pub no_timing: bool,
    pub quiet: bool,
}

pub fn cmd_train(c: &Common, a: &TrainArgs) -> Result<PathBuf> {
    let mut r = c.resolve()?;
    if let Some(k) = a.iterations {
        r.train.optimizer.iterations = k;
    }
    r.train.log_every = if a.quiet { 0 } else { 50 };
    let ds = match &a.dataset {
        Some(p) => load_dataset(p)?,
        None => r.experiment.generate()?,
    };
    if ds.dim() != r.experiment.system.dim() {
        return Err(OcnError::Config(format!(
            "dataset dimension {} does not match {}",
            ds.dim(),
            r.experiment.system.name()
        )));
    }
    let init = match &a.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let dir = c.out_dir(Some(&r))?;
    let out = train_with(&r.train, &ds, init, |e| eprintln!("iter {:>6}  J = {:.6e}  |g| = {:.3e}", e.iteration, e.loss, e.grad_norm))?;
    let model = dir.join("model.json");
    save_checkpoint(&out.field, &model)?;
    let mut hist = out.history.clone();
    if a.no_timing {
        hist.iter_mut().for_each(|e| e.wall_ms = 0);
    }
    write_history_csv(&hist, fs::File::create(dir.join("history.csv"))?)?;
    let why = match out.stop {
        StopReason::Budget => "budget reached",
        StopReason::Threshold => "threshold reached",
        StopReason::Stalled => "line search stalled",
    };
    eprintln!("final J = {:.6e} ({why}); wrote {}", out.final_loss, model.display());
    Ok(model)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: Option<PathBuf>,
    /// Evaluate on this many fresh initial points from the system domain.
    pub unseen: Option<usize>,
    /// Prediction horizon; defaults to the data horizon.
    pub horizon: Option<f64>,
    /// Write per-trajectory losses for a histogram.
    pub histogram: bool,
}

/// Offset applied to the seed when drawing evaluation points, so they differ
/// from the training points drawn with the same seed.
pub const UNSEEN_SEED_OFFSET: u64 = 0x5eed;

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: DiagnosticsReport,
    pub comparisons: Vec<Comparison>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_eval(c: &Common, a: &EvalArgs) -> Result<EvalOutput> {
    let r = c.resolve()?;
    let field = load_checkpoint(&a.checkpoint)?;
    let sys = r.experiment.system;
    if field.dim() != sys.dim() || field.mode() != r.train.mode {
        return Err(OcnError::Config(format!(
            "checkpoint of dimension {} ({}) does not fit {}",
            field.dim(),
            field.mode().as_str(),
            sys.name()
        )));
    }
    let ds = match &a.dataset {
        Some(p) => Some(load_dataset(p)?),
        None => None,
    };
    if let Some(d) = &ds {
        if d.dim() != field.dim() {
            return Err(OcnError::Config("dataset and checkpoint dimensions differ".into()));
        }
    }
    let dt = ds.as_ref().map_or(r.experiment.dt, |d| d.dt);
    let horizon = a.horizon.or(ds.as_ref().map(|d| d.horizon())).unwrap_or(r.experiment.horizon);
    let initials = match (a.unseen, &ds) {
        (Some(k), _) => sample_initials(&r.experiment.domain, k, r.experiment.seed.wrapping_add(UNSEEN_SEED_OFFSET))?,
        (None, Some(d)) => d.initial_points(),
        (None, None) => r.experiment.initials()?,
    };
    let refine = GRID_REFINEMENT as usize;
    let mut comparisons = Vec::with_capacity(initials.len());
    for x0 in &initials {
        comparisons.push(compare_flows(&sys, &field, x0, horizon, dt / GRID_REFINEMENT)?);
    }
    let mut report = DiagnosticsReport {
        trajectory_err_max: Some(comparisons.iter().map(Comparison::max_error).fold(0.0, f64::max)),
        ..Default::default()
    };
    if let Some(d) = &ds {
        report.loss = Some(loss_only(&field, d, &r.train.objective)?);
    }
    if sys.is_gradient_flow() && field.mode() == FieldMode::Scalar {
        let pts: Vec<Vec<f64>> = match &ds {
            Some(d) => d.trajectories.iter().flat_map(|t| t.states.clone()).collect(),
            None => comparisons.iter().flat_map(|c| c.truth.iter().step_by(refine).cloned()).collect(),
        };
        let fe = field_error(&field, &sys, &pts)?;
        report.field_err_max = Some(fe.gradient_max);
        report.potential_rms_after_shift = Some(fe.potential_rms);
    }
    if let (Some(j), Some(e)) = (report.loss, report.trajectory_err_max) {
        report.bound_ratio = Some(bound_ratio(e, j, dt));
    }
    let dir = c.out_dir(Some(&r))?;
    let mut files = vec![dir.join("report.json")];
    fs::write(&files[0], report.to_json()? + "\n")?;
    if r.output.emit_plots_data {
        let path = dir.join("trajectories.csv");
        write_comparisons(&comparisons, refine, &path)?;
        files.push(path);
    }
    if a.histogram {
        let path = dir.join("histogram.csv");
        let mut w = csv::Writer::from_path(&path).map_err(OcnError::from)?;
        w.write_record(["traj_id", "loss"]).map_err(OcnError::from)?;
        for (k, cmp) in comparisons.iter().enumerate() {
            let coarse = Comparison {
                times: cmp.times.iter().step_by(refine).copied().collect(),
                truth: cmp.truth.iter().step_by(refine).cloned().collect(),
                model: cmp.model.iter().step_by(refine).cloned().collect(),
            };
            w.write_record([k.to_string(), fmt_f64(coarse.squared_loss())]).map_err(OcnError::from)?;
        }
        w.flush()?;
        files.push(path);
    }
    Ok(EvalOutput { report, comparisons, files })
}

/// `traj_id,t,x1..xd,y1..yd` on every `stride`-th grid point.
fn write_comparisons(cmps: &[Comparison], stride: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(OcnError::from)?;
    let d = cmps.first().map_or(0, |c| c.truth[0].len());
    let mut header = vec!["traj_id".to_string(), "t".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    header.extend((1..=d).map(|i| format!("y{i}")));
    w.write_record(&header).map_err(OcnError::from)?;
    for (k, c) in cmps.iter().enumerate() {
        for i in (0..c.times.len()).step_by(stride) {
            let mut row = vec![k.to_string(), fmt_f64(c.times[i])];
            row.extend(c.truth[i].iter().map(|v| fmt_f64(*v)));
            row.extend(c.model[i].iter().map(|v| fmt_f64(*v)));
            w.write_record(&row).map_err(OcnError::from)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const CHECK_GRAD_TOL: f64 = 1e-5;
pub const CHECK_INVARIANT_TOL: f64 = 1e-10;
const CHECK_PAIRS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub grad_fd_max_rel_err_standard: f64,
    pub grad_fd_max_rel_err_augmented: f64,
    pub invariant_drift_max: f64,
    pub passed: bool,
}

/// Small dataset on which the gradient and invariant suites run.
pub fn check_dataset(system: &System, domain: &Domain, seed: u64) -> Result<Dataset> {
    let dt = if system.dim() == 3 { 0.01 } else { 0.05 };
    let init = sample_initials(domain, 2, seed)?;
    generate_dataset(system, &init, 4.0 * dt, dt, &generator_control(), Some(seed))
}

/// Runs both suites with `grad_fn` standing in for the co-state gradient.
pub fn run_check(field: &MlpField, ds: &Dataset, seed: u64, grad_fn: &GradFn) -> Result<CheckReport> {
    let solver = SolverSpec::fixed(Method::Dopri5, ds.dt / 5.0);
    let mut errs = [0.0; 2];
    for (e, loss) in errs.iter_mut().zip([LossSpec::Standard, LossSpec::Augmented { omega: 1.0 }]) {
        let obj = Objective { loss, batch_len: 3, solver };
        *e = fd_gradient_check_with(field, ds, &obj, 1e-5, grad_fn)?.max_rel_err;
    }
    let d = field.dim();
    let tape = integrate_fixed(field, &ds.trajectories[0].states[0], (0.0, 20.0 * ds.dt / 5.0), Method::Dopri5, ds.dt / 5.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inv: f64 = 0.0;
    for _ in 0..CHECK_PAIRS {
        let p: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        inv = inv.max(invariant_drift(&tape, field, &p, &q)?);
    }
    let passed = errs.iter().all(|e| *e <= CHECK_GRAD_TOL) && inv <= CHECK_INVARIANT_TOL;
    Ok(CheckReport {
        grad_fd_max_rel_err_standard: errs[0],
        grad_fd_max_rel_err_augmented: errs[1],
        invariant_drift_max: inv,
        passed,
    })
}

#[derive(Debug, Clone, Default)]
pub struct CheckArgs {
    pub checkpoint: Option<PathBuf>,
}

/// Default architecture for a fresh check.
pub const CHECK_DIMS: [usize; 3] = [2, 8, 1];

pub fn cmd_check(c: &Common, a: &CheckArgs) -> Result<(CheckReport, Status)> {
    let seed = c.seed.unwrap_or(0);
    let field = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => MlpField::init(&CHECK_DIMS, FieldMode::Scalar, seed)?,
    };
    let (system, domain) = if c.config.is_some() || c.preset.is_some() {
        let r = c.resolve()?;
        (r.experiment.system, r.experiment.domain)
    } else {
        match field.dim() {
            2 => (System::LinearGf, Domain::Box { lo: vec![-2.0; 2], hi: vec![2.0; 2] }),
            3 => (System::lorenz(), Domain::Ball { center: vec![10.0, 15.0, 17.0], radius: 1.0 }),
            d => return Err(OcnError::Config(format!("no built-in system of dimension {d}; pass --preset"))),
        }
    };
    if system.dim() != field.dim() {
        return Err(OcnError::Config("checkpoint does not match the system dimension".into()));
    }
    let ds = check_dataset(&system, &domain, seed)?;
    let rep = run_check(&field, &ds, seed, &loss_and_gradient)?;
    let text = serde_json::to_string_pretty(&rep)?;
    println!("{text}");
    if let Some(dir) = &c.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("check.json"), text + "\n")?;
    }
    Ok((rep.clone(), if rep.passed { Status::Pass } else { Status::Fail }))
}

/// Process exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &OcnError) -> i32 {
    if e.is_config() {
        2
    } else {
        1
    }
}
