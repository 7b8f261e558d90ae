//! Empirical checks: finite-difference gradient verification, conserved
//! quantities of the sweeps, and error measures against known systems.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, OcnError, Result};
use crate::field::{FieldMode, MlpField, ParamVector};
use crate::solver::{adjoint_sweep, integrate_forward_with, variational_sweep, ButcherTableau, Drift, ForwardTape, StepControl};
use crate::systems::System;
use crate::train::{loss_and_gradient, loss_only, Dataset, Objective};

/// Floor for per-component relative errors, as a fraction of the largest
/// gradient entry; keeps round-off in near-zero components from dominating.
pub const FD_REL_FLOOR: f64 = 1e-3;

/// Above this many parameters the check samples random directions.
pub const FD_COORDINATE_LIMIT: usize = 4000;
pub const FD_DIRECTIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of coordinates or directions compared.
    pub probes: usize,
}

/// Gradient function under test, `(field, data, objective) → (J, ∇J)`.
pub type GradFn = dyn Fn(&MlpField, &Dataset, &Objective) -> Result<(f64, ParamVector)>;

/// Compares the co-state gradient with central differences of the loss.
pub fn fd_gradient_check(field: &MlpField, ds: &Dataset, obj: &Objective, eps: f64) -> Result<FdReport> {
    fd_gradient_check_with(field, ds, obj, eps, &loss_and_gradient)
}

/// As [`fd_gradient_check`] with a substitute gradient routine.
pub fn fd_gradient_check_with(
    field: &MlpField,
    ds: &Dataset,
    obj: &Objective,
    eps: f64,
    grad_fn: &GradFn,
) -> Result<FdReport> {
    if !obj.solver.control.is_fixed() {
        return config("finite-difference checks need a fixed-step solver");
    }
    if !(eps > 0.0) {
        return config("finite-difference step must be positive");
    }
    let (_, g) = grad_fn(field, ds, obj)?;
    let n = field.num_params();
    let base = field.get_params();
    let mut probe = field.clone();
    let mut loss_at = |p: ParamVector| -> Result<f64> {
        probe.set_params(p)?;
        loss_only(&probe, ds, obj)
    };
    let mut pairs = Vec::new();
    if n <= FD_COORDINATE_LIMIT {
        for i in 0..n {
            let mut p = base.clone();
            p.0[i] += eps;
            let jp = loss_at(p.clone())?;
            p.0[i] -= 2.0 * eps;
            let jm = loss_at(p)?;
            pairs.push(((jp - jm) / (2.0 * eps), g[i]));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..FD_DIRECTIONS {
            let mut u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            let u = ParamVector(u);
            let jp = loss_at(base.add(&u.scaled(eps)))?;
            let jm = loss_at(base.add(&u.scaled(-eps)))?;
            pairs.push(((jp - jm) / (2.0 * eps), g.dot(&u)));
        }
    }
    let scale = pairs.iter().fold(0.0f64, |m, &(fd, an)| m.max(fd.abs()).max(an.abs()));
    let floor = (FD_REL_FLOOR * scale).max(f64::MIN_POSITIVE);
    let mut rep = FdReport { max_rel_err: 0.0, max_abs_err: 0.0, probes: pairs.len() };
    for (fd, an) in pairs {
        let abs = (fd - an).abs();
        rep.max_abs_err = rep.max_abs_err.max(abs);
        rep.max_rel_err = rep.max_rel_err.max(abs / an.abs().max(floor));
    }
    if scale == 0.0 {
        rep.max_rel_err = 0.0;
    }
    Ok(rep)
}

/// Largest relative change of `δᵀp` across the step boundaries of one tape.
pub fn invariant_drift(tape: &ForwardTape, field: &MlpField, p_end: &[f64], delta0: &[f64]) -> Result<f64> {
    let p = adjoint_sweep(tape, field, p_end)?.p_steps;
    let delta = variational_sweep(tape, field, delta0)?;
    let s: Vec<f64> = delta.iter().zip(&p).map(|(a, b)| dot(a, b)).collect();
    let denom = s[0].abs().max(1.0);
    Ok(s.iter().map(|v| (v - s[0]).abs() / denom).fold(0.0, f64::max))
}

/// Largest change of `H = drift(y)·p` across step boundaries, given the
/// co-state at each boundary.
pub fn hamiltonian_drift(tape: &ForwardTape, field: &MlpField, p_steps: &[Vec<f64>]) -> Result<f64> {
    let ys = tape.boundary_states();
    if p_steps.len() != ys.len() {
        return config(format!("expected {} co-states, got {}", ys.len(), p_steps.len()));
    }
    let h: Vec<f64> = ys.iter().zip(p_steps).map(|(y, p)| field.drift(y).map(|f| dot(&f, p))).collect::<Result<_>>()?;
    Ok(h.iter().map(|v| (v - h[0]).abs()).fold(0.0, f64::max))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Tolerances used for reference integrations.
pub const EVAL_RTOL: f64 = 1e-10;
pub const EVAL_ATOL: f64 = 1e-12;

/// States of a flow sampled on a uniform grid `t_k = k · step`.
pub fn sample_flow<D: Drift + ?Sized>(drift: &D, x0: &[f64], horizon: f64, step: f64) -> Result<Vec<Vec<f64>>> {
    if !(step > 0.0 && horizon > 0.0) {
        return config("grid step and horizon must be positive");
    }
    if x0.len() != drift.dim() {
        return config(format!("initial point has dimension {}, expected {}", x0.len(), drift.dim()));
    }
    let n = (horizon / step).round().max(1.0) as usize;
    let tab = ButcherTableau::dopri5();
    let mut ctrl = StepControl::adaptive(EVAL_RTOL, EVAL_ATOL);
    let mut work = drift.work();
    let mut out = Vec::with_capacity(n + 1);
    out.push(x0.to_vec());
    for k in 0..n {
        let span = (k as f64 * horizon / n as f64, (k + 1) as f64 * horizon / n as f64);
        let tape = integrate_forward_with(drift, &mut work, out.last().unwrap(), span, &tab, &ctrl)?;
        ctrl.h_init = Some(tape.h_next);
        out.push(tape.y_end);
    }
    Ok(out)
}

/// True and learned trajectories from one initial point on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub times: Vec<f64>,
    pub truth: Vec<Vec<f64>>,
    pub model: Vec<Vec<f64>>,
}

impl Comparison {
    pub fn max_error(&self) -> f64 {
        self.truth.iter().zip(&self.model).map(|(a, b)| dist(a, b)).fold(0.0, f64::max)
    }

    /// `Σ_k ‖x(t_k) − y(t_k)‖²` over the grid excluding `t = 0`.
    pub fn squared_loss(&self) -> f64 {
        self.truth.iter().zip(&self.model).skip(1).map(|(a, b)| dist(a, b).powi(2)).sum()
    }
}

pub fn compare_flows<A: Drift + ?Sized, B: Drift + ?Sized>(
    truth: &A,
    model: &B,
    x0: &[f64],
    horizon: f64,
    step: f64,
) -> Result<Comparison> {
    let t = sample_flow(truth, x0, horizon, step).map_err(|e| OcnError::Evaluation { side: "true", source: Box::new(e) })?;
    let m = sample_flow(model, x0, horizon, step).map_err(|e| OcnError::Evaluation { side: "learned", source: Box::new(e) })?;
    let n = t.len() - 1;
    let times = (0..=n).map(|k| k as f64 * horizon / n as f64).collect();
    Ok(Comparison { times, truth: t, model: m })
}

/// Grid refinement relative to the data spacing.
pub const GRID_REFINEMENT: f64 = 10.0;

/// `max_t ‖x(t) − y(t)‖` over `[0, horizon]` on a grid ten times finer than `dt`.
pub fn trajectory_error(field: &MlpField, system: &System, x0: &[f64], horizon: f64, dt: f64) -> Result<f64> {
    Ok(compare_flows(system, field, x0, horizon, dt / GRID_REFINEMENT)?.max_error())
}

/// RMS of `model − truth` after removing the mean difference.
pub fn shifted_rms(model: &[f64], truth: &[f64]) -> f64 {
    let n = model.len() as f64;
    let diff: Vec<f64> = model.iter().zip(truth).map(|(a, b)| a - b).collect();
    let mean = diff.iter().sum::<f64>() / n;
    (diff.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    /// `max_i ‖∇f(x_i) − ∇G(x_i)‖`.
    pub gradient_max: f64,
    pub potential_rms: f64,
}

/// Gradient and gauge-adjusted potential errors at `points`.
pub fn field_error(field: &MlpField, system: &System, points: &[Vec<f64>]) -> Result<FieldError> {
    if field.mode() != FieldMode::Scalar {
        return Err(OcnError::Unsupported("field error needs a scalar potential".into()));
    }
    if !system.is_gradient_flow() {
        return Err(OcnError::Unsupported(format!("{} is not a gradient flow", system.name())));
    }
    if points.is_empty() {
        return config("no evaluation points");
    }
    let mut gmax: f64 = 0.0;
    let (mut model, mut truth) = (Vec::new(), Vec::new());
    for x in points {
        gmax = gmax.max(dist(&field.drift(x)?, &system.true_drift(x)));
        model.push(field.potential(x)?);
        truth.push(system.true_potential(x)?);
    }
    Ok(FieldError { gradient_max: gmax, potential_rms: shifted_rms(&model, &truth) })
}

/// Summary written by `eval` and `check`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_fd_max_rel_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invariant_drift_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hamiltonian_drift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory_err_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field_err_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub potential_rms_after_shift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

impl DiagnosticsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `e_max / (√J + Δt²)`.
pub fn bound_ratio(e_max: f64, loss: f64, dt: f64) -> f64 {
    e_max / (loss.sqrt() + dt * dt)
}

/// One row of a Δt scaling study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub dt: f64,
    pub loss: f64,
    pub e_max: f64,
    pub field_err: f64,
    pub bound_ratio: f64,
}

pub fn write_scaling_csv<W: std::io::Write>(rows: &[ScalingRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["dt", "J", "e_max", "field_err", "bound_ratio"])?;
    for r in rows {
        wr.write_record([r.dt, r.loss, r.e_max, r.field_err, r.bound_ratio].map(|v| format!("{v:.16e}")))?;
    }
    wr.flush()?;
    Ok(())
}
