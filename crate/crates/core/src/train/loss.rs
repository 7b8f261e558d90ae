use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{config, OcnError, Result};
use crate::field::{MlpField, ParamVector, Scratch};
use crate::solver::{adjoint_sweep_into, integrate_forward_with, ButcherTableau, ForwardTape, Method, StepControl};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LossSpec {
    /// `Σ ‖y(t_i) − x_i‖²`.
    Standard,
    /// Adds `ω Σ ‖drift(y(t_{i−1})) − (x_i − x_{i−1})/Δt‖²`.
    Augmented { omega: f64 },
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::Standard
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if let LossSpec::Augmented { omega } = *self {
            if !(omega > 0.0 && omega.is_finite()) {
                return config(format!("augmented loss weight must be positive, got {omega}"));
            }
        }
        Ok(())
    }

    fn omega(&self) -> Option<f64> {
        match *self {
            LossSpec::Standard => None,
            LossSpec::Augmented { omega } => Some(omega),
        }
    }
}

/// Integrator used for the surrogate trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub method: Method,
    pub control: StepControl,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec { method: Method::Dopri5, control: StepControl::adaptive(1e-6, 1e-8) }
    }
}

impl SolverSpec {
    pub fn fixed(method: Method, h: f64) -> Self {
        SolverSpec { method, control: StepControl::fixed(h) }
    }

    pub fn validate(&self) -> Result<()> {
        self.control.validate()?;
        if !self.control.is_fixed() && self.method.tableau().b_hat.is_none() {
            return config(format!("{} has no embedded error estimate; use a fixed step", self.method.as_str()));
        }
        Ok(())
    }
}

/// Everything that defines the training loss apart from the field and data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub loss: LossSpec,
    pub batch_len: usize,
    pub solver: SolverSpec,
}

impl Default for Objective {
    fn default() -> Self {
        Objective { loss: LossSpec::Standard, batch_len: 2, solver: SolverSpec::default() }
    }
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        if self.batch_len < 2 {
            return config(format!("batch length must be at least 2, got {}", self.batch_len));
        }
        self.loss.validate()?;
        self.solver.validate()
    }
}

/// Index ranges `[n_j, n_{j+1}]` of consecutive segments sharing endpoints;
/// the last one may be shorter.
pub fn batch_split(n: usize, batch_len: usize) -> Result<Vec<(usize, usize)>> {
    if batch_len < 2 {
        return config(format!("batch length must be at least 2, got {batch_len}"));
    }
    let stride = batch_len - 1;
    let mut out = Vec::with_capacity(n.div_ceil(stride));
    let mut a = 0;
    while a < n {
        let b = (a + stride).min(n);
        out.push((a, b));
        a = b;
    }
    Ok(out)
}

struct Ctx<'a> {
    field: &'a MlpField,
    tab: ButcherTableau,
    obj: &'a Objective,
    dt: f64,
    scratch: Scratch,
    drift: Vec<f64>,
    tmp: Vec<f64>,
}

/// Forward pass over one batch. Returns the batch loss; tapes and augmented
/// residuals are kept when `keep` is set.
fn forward_batch(
    ctx: &mut Ctx<'_>,
    states: &[Vec<f64>],
    t0: f64,
    first: usize,
    keep: Option<(&mut Vec<ForwardTape>, &mut Vec<Vec<f64>>)>,
) -> Result<f64> {
    let mut ctrl = ctx.obj.solver.control;
    let omega = ctx.obj.loss.omega();
    let d = ctx.field.dim();
    let mut y = states[0].clone();
    let mut j = 0.0;
    let (mut tapes, mut resid) = match keep {
        Some((t, r)) => (Some(t), Some(r)),
        None => (None, None),
    };
    for i in 1..states.len() {
        let ta = t0 + (first + i - 1) as f64 * ctx.dt;
        let tb = t0 + (first + i) as f64 * ctx.dt;
        let tape = integrate_forward_with(ctx.field, &mut ctx.scratch, &y, (ta, tb), &ctx.tab, &ctrl)?;
        if !ctrl.is_fixed() {
            ctrl.h_init = Some(tape.h_next);
        }
        let x = &states[i];
        let mut sq = 0.0;
        for k in 0..d {
            let e = tape.y_end[k] - x[k];
            sq += e * e;
        }
        j += sq;
        if let Some(w) = omega {
            ctx.field.drift_into(&y, &mut ctx.drift, &mut ctx.scratch);
            let mut rsq = 0.0;
            for k in 0..d {
                let r = ctx.drift[k] - (x[k] - states[i - 1][k]) / ctx.dt;
                ctx.tmp[k] = r;
                rsq += r * r;
            }
            j += w * rsq;
            if let Some(r) = resid.as_deref_mut() {
                r.push(ctx.tmp.clone());
            }
        }
        y.clone_from(&tape.y_end);
        if let Some(t) = tapes.as_deref_mut() {
            t.push(tape);
        }
    }
    if !j.is_finite() {
        return Err(OcnError::BlowUp { t: t0 + (first + states.len() - 1) as f64 * ctx.dt });
    }
    Ok(j)
}

/// Backward pass over one batch, accumulating `∂J/∂θ` into `grad`.
fn backward_batch(
    ctx: &mut Ctx<'_>,
    states: &[Vec<f64>],
    tapes: &[ForwardTape],
    resid: &[Vec<f64>],
    grad: &mut [f64],
) {
    let d = ctx.field.dim();
    let omega = ctx.obj.loss.omega();
    let last = tapes.len();
    let mut p: Vec<f64> = (0..d).map(|k| 2.0 * (tapes[last - 1].y_end[k] - states[last][k])).collect();
    for l in (1..=last).rev() {
        let tape = &tapes[l - 1];
        adjoint_sweep_into(tape, ctx.field, &mut p, grad, None, &mut ctx.scratch);
        // p now sits at t_{l-1}
        let y_prev: &[f64] = if l > 1 { &tapes[l - 2].y_end } else { &states[0] };
        if let Some(w) = omega {
            ctx.field.vjp_and_param_grad(y_prev, &resid[l - 1], 2.0 * w, Some(grad), &mut ctx.tmp, &mut ctx.scratch);
            if l > 1 {
                for k in 0..d {
                    p[k] += 2.0 * w * ctx.tmp[k];
                }
            }
        }
        if l > 1 {
            for k in 0..d {
                p[k] += 2.0 * (y_prev[k] - states[l - 1][k]);
            }
        }
    }
}

fn evaluate(field: &MlpField, ds: &Dataset, obj: &Objective, want_grad: bool) -> Result<(f64, Option<ParamVector>)> {
    obj.validate()?;
    ds.validate()?;
    if field.dim() != ds.dim() {
        return config(format!("field dimension {} does not match dataset dimension {}", field.dim(), ds.dim()));
    }
    let d = field.dim();
    let np = field.num_params();
    let mut ctx = Ctx {
        field,
        tab: obj.solver.method.tableau(),
        obj,
        dt: ds.dt,
        scratch: field.scratch(),
        drift: vec![0.0; d],
        tmp: vec![0.0; d],
    };
    let batches = batch_split(ds.intervals(), obj.batch_len)?;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; np]);
    let mut traj_grad = vec![0.0; if want_grad { np } else { 0 }];
    let mut tapes = Vec::new();
    let mut resid = Vec::new();
    for (k, tr) in ds.trajectories.iter().enumerate() {
        let mut traj_j = 0.0;
        traj_grad.fill(0.0);
        for (b, &(lo, hi)) in batches.iter().enumerate() {
            let seg = &tr.states[lo..=hi];
            let tag = |e| OcnError::InBatch { trajectory: k, batch: b, source: Box::new(e) };
            if want_grad {
                tapes.clear();
                resid.clear();
                traj_j += forward_batch(&mut ctx, seg, tr.t0, lo, Some((&mut tapes, &mut resid))).map_err(tag)?;
                backward_batch(&mut ctx, seg, &tapes, &resid, &mut traj_grad);
            } else {
                traj_j += forward_batch(&mut ctx, seg, tr.t0, lo, None).map_err(tag)?;
            }
        }
        total += traj_j;
        if let Some(g) = grad.as_mut() {
            for (gi, ti) in g.iter_mut().zip(&traj_grad) {
                *gi += ti;
            }
        }
    }
    Ok((total, grad.map(ParamVector)))
}

/// Training loss `J(θ)` summed over trajectories, batches and observation times.
pub fn loss_only(field: &MlpField, ds: &Dataset, obj: &Objective) -> Result<f64> {
    evaluate(field, ds, obj, false).map(|(j, _)| j)
}

/// `J(θ)` and its exact discrete gradient from per-batch co-state sweeps.
pub fn loss_and_gradient(field: &MlpField, ds: &Dataset, obj: &Objective) -> Result<(f64, ParamVector)> {
    let (j, g) = evaluate(field, ds, obj, true)?;
    Ok((j, g.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldMode;
    use crate::systems::{generate_dataset, generator_control, System};
    use crate::train::{DatasetMeta, Trajectory};

    fn small_ds() -> Dataset {
        let init = vec![vec![1.0, -0.5], vec![-0.3, 0.8]];
        generate_dataset(&System::LinearGf, &init, 0.2, 0.05, &generator_control(), None).unwrap()
    }

    fn fd_check(field: &MlpField, ds: &Dataset, obj: &Objective) -> f64 {
        let (_, g) = loss_and_gradient(field, ds, obj).unwrap();
        let mut worst: f64 = 0.0;
        let scale = g.norm() / (g.len() as f64).sqrt();
        for i in 0..field.num_params() {
            let h = 1e-5;
            let mut f = field.clone();
            let mut p = f.get_params();
            p.0[i] += h;
            f.set_params(p.clone()).unwrap();
            let jp = loss_only(&f, ds, obj).unwrap();
            p.0[i] -= 2.0 * h;
            f.set_params(p).unwrap();
            let jm = loss_only(&f, ds, obj).unwrap();
            let fd = (jp - jm) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(scale));
        }
        worst
    }

    #[test]
    fn batch_split_examples() {
        assert_eq!(batch_split(4, 2).unwrap(), vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(batch_split(4, 5).unwrap(), vec![(0, 4)]);
        assert_eq!(batch_split(5, 3).unwrap(), vec![(0, 2), (2, 4), (4, 5)]);
        assert!(batch_split(4, 1).is_err());
    }

    #[test]
    fn squared_norm_example() {
        // zero field keeps y at x_0 = (1, 0); target (0, 0)
        let field = MlpField::zeros(&[2, 3, 2], FieldMode::Vector).unwrap();
        let ds = Dataset::new(0.1, vec![Trajectory::new(0.0, vec![vec![1.0, 0.0], vec![0.0, 0.0]])], DatasetMeta::default())
            .unwrap();
        let obj = Objective { solver: SolverSpec::fixed(Method::Rk4, 0.1), ..Default::default() };
        assert_eq!(loss_only(&field, &ds, &obj).unwrap(), 1.0);
        // augmented residual vanishes when the drift equals the difference quotient
        let ds2 = Dataset::new(0.1, vec![Trajectory::new(0.0, vec![vec![1.0, 0.0], vec![1.0, 0.0]])], DatasetMeta::default())
            .unwrap();
        let aug = Objective { loss: LossSpec::Augmented { omega: 3.0 }, ..obj };
        assert_eq!(loss_only(&field, &ds2, &aug).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = small_ds();
        for (mode, dims) in [(FieldMode::Scalar, vec![2, 6, 1]), (FieldMode::Vector, vec![2, 5, 2])] {
            let field = MlpField::init(&dims, mode, 3).unwrap();
            for loss in [LossSpec::Standard, LossSpec::Augmented { omega: 1.0 }] {
                for batch_len in [2, 3, 5] {
                    let obj = Objective { loss, batch_len, solver: SolverSpec::fixed(Method::Dopri5, 0.025) };
                    let err = fd_check(&field, &ds, &obj);
                    assert!(err <= 1e-5, "{mode:?} {loss:?} {batch_len}: {err}");
                }
            }
        }
    }

    #[test]
    fn loss_is_bitwise_shared() {
        let ds = small_ds();
        let field = MlpField::init(&[2, 6, 1], FieldMode::Scalar, 1).unwrap();
        for loss in [LossSpec::Standard, LossSpec::Augmented { omega: 0.5 }] {
            let obj = Objective { loss, batch_len: 3, ..Default::default() };
            let (j, _) = loss_and_gradient(&field, &ds, &obj).unwrap();
            assert_eq!(j.to_bits(), loss_only(&field, &ds, &obj).unwrap().to_bits());
        }
    }

    #[test]
    fn doubling_dataset_doubles_everything() {
        let ds = small_ds();
        let mut twice = ds.clone();
        twice.trajectories = vec![ds.trajectories[0].clone(), ds.trajectories[0].clone()];
        let mut once = ds.clone();
        once.trajectories.truncate(1);
        let field = MlpField::init(&[2, 6, 1], FieldMode::Scalar, 1).unwrap();
        let obj = Objective { loss: LossSpec::Augmented { omega: 1.0 }, ..Default::default() };
        let (j1, g1) = loss_and_gradient(&field, &once, &obj).unwrap();
        let (j2, g2) = loss_and_gradient(&field, &twice, &obj).unwrap();
        assert_eq!(j2, 2.0 * j1);
        assert_eq!(g2, g1.scaled(2.0));
    }

    #[test]
    fn self_generated_data_has_zero_gradient() {
        let field = MlpField::init(&[2, 6, 2], FieldMode::Vector, 4).unwrap();
        let obj = Objective { solver: SolverSpec::fixed(Method::Rk4, 0.05), ..Default::default() };
        let mut states = vec![vec![0.4, -0.2]];
        for _ in 0..4 {
            let tape = crate::solver::integrate_fixed(&field, states.last().unwrap(), (0.0, 0.05), Method::Rk4, 0.05).unwrap();
            states.push(tape.y_end);
        }
        let ds = Dataset::new(0.05, vec![Trajectory::new(0.0, states)], DatasetMeta::default()).unwrap();
        let (j, g) = loss_and_gradient(&field, &ds, &obj).unwrap();
        assert!(j <= 1e-28, "{j}");
        assert!(g.norm() <= 1e-12, "{}", g.norm());
    }

    #[test]
    fn config_errors() {
        let ds = small_ds();
        let field = MlpField::init(&[3, 4, 1], FieldMode::Scalar, 0).unwrap();
        assert!(loss_only(&field, &ds, &Objective::default()).unwrap_err().is_config());
        let f2 = MlpField::init(&[2, 4, 1], FieldMode::Scalar, 0).unwrap();
        let bad = Objective { loss: LossSpec::Augmented { omega: 0.0 }, ..Default::default() };
        assert!(loss_only(&f2, &ds, &bad).unwrap_err().is_config());
        let bad = Objective { batch_len: 1, ..Default::default() };
        assert!(loss_only(&f2, &ds, &bad).unwrap_err().is_config());
        let bad = Objective { solver: SolverSpec { method: Method::Rk4, control: StepControl::default() }, ..Default::default() };
        assert!(loss_only(&f2, &ds, &bad).unwrap_err().is_config());
    }

    #[test]
    fn trajectory_order_only_reassociates() {
        let init = vec![vec![1.0, -0.5], vec![-0.3, 0.8], vec![1.7, 1.1]];
        let ds = generate_dataset(&System::LinearGf, &init, 0.3, 0.05, &generator_control(), None).unwrap();
        let mut rev = ds.clone();
        rev.trajectories.reverse();
        let field = MlpField::init(&[2, 6, 1], FieldMode::Scalar, 2).unwrap();
        for loss in [LossSpec::Standard, LossSpec::Augmented { omega: 0.5 }] {
            let obj = Objective { loss, batch_len: 3, ..Default::default() };
            let (j1, g1) = loss_and_gradient(&field, &ds, &obj).unwrap();
            let (j2, g2) = loss_and_gradient(&field, &rev, &obj).unwrap();
            assert!((j1 - j2).abs() <= 1e-12 * j1.abs());
            let scale = g1.norm();
            assert!((0..g1.len()).all(|i| (g1[i] - g2[i]).abs() <= 1e-12 * scale));
        }
    }

    proptest::proptest! {
        #[test]
        fn batches_tile_the_trajectory(n in 1usize..60, batch_len in 2usize..12) {
            let segs = batch_split(n, batch_len).unwrap();
            proptest::prop_assert_eq!(segs.first().unwrap().0, 0);
            proptest::prop_assert_eq!(segs.last().unwrap().1, n);
            for w in segs.windows(2) {
                proptest::prop_assert_eq!(w[0].1, w[1].0);
            }
            for &(a, b) in &segs {
                proptest::prop_assert!(b > a && b - a < batch_len);
            }
        }
    }
}
