use serde::{Deserialize, Serialize};

use super::{ButcherTableau, Drift, Method};
use crate::error::{config, OcnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum StepMode {
    Adaptive { rtol: f64, atol: f64 },
    Fixed { h: f64 },
}

/// Step-size policy for [`integrate_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepControl {
    pub mode: StepMode,
    pub h_min: f64,
    /// Upper bound on the step; `None` means the span length.
    pub h_max: Option<f64>,
    pub safety: f64,
    /// Budget on attempted steps (accepted + rejected).
    pub max_steps: usize,
    /// First trial step in adaptive mode; `None` means `h_max`.
    pub h_init: Option<f64>,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl::adaptive(1e-6, 1e-8)
    }
}

impl StepControl {
    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        StepControl {
            mode: StepMode::Adaptive { rtol, atol },
            h_min: 1e-12,
            h_max: None,
            safety: 0.9,
            max_steps: 100_000,
            h_init: None,
        }
    }

    pub fn fixed(h: f64) -> Self {
        StepControl {
            mode: StepMode::Fixed { h },
            ..StepControl::adaptive(1e-6, 1e-8)
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.mode, StepMode::Fixed { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            StepMode::Adaptive { rtol, atol } => {
                if !(rtol > 0.0 && atol > 0.0) {
                    return config("tolerances must be positive");
                }
            }
            StepMode::Fixed { h } => {
                if !(h > 0.0 && h.is_finite()) {
                    return config("fixed step size must be positive");
                }
            }
        }
        if let Some(hmax) = self.h_max {
            if !(hmax >= self.h_min) {
                return config("h_min must not exceed h_max");
            }
        }
        if !(self.h_min >= 0.0) || self.max_steps == 0 {
            return config("invalid step limits");
        }
        Ok(())
    }
}

/// One accepted step: start time, step size, start state and stage states.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub tau: f64,
    pub y: Vec<f64>,
    /// Stage states `y_{l,i}`, stage-major (`stages × d`).
    pub stages: Vec<f64>,
}

impl StepRecord {
    pub fn stage(&self, i: usize, d: usize) -> &[f64] {
        &self.stages[i * d..(i + 1) * d]
    }
}

/// Record of a forward integration over one span.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub t_start: f64,
    pub t_end: f64,
    pub dim: usize,
    pub tableau: ButcherTableau,
    pub steps: Vec<StepRecord>,
    pub y_end: Vec<f64>,
    /// Step size the controller would try next.
    pub h_next: f64,
    /// Number of rejected trial steps.
    pub rejected: usize,
}

impl ForwardTape {
    /// State at every step boundary, `y_0 … y_L` (`y_L = y_end`).
    pub fn boundary_states(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.steps.iter().map(|s| s.y.clone()).collect();
        out.push(self.y_end.clone());
        out
    }

    pub fn boundary_times(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.steps.iter().map(|s| s.t).collect();
        out.push(self.t_end);
        out
    }
}

pub fn integrate_forward<D: Drift + ?Sized>(
    drift: &D,
    y0: &[f64],
    span: (f64, f64),
    tableau: &ButcherTableau,
    ctrl: &StepControl,
) -> Result<ForwardTape> {
    let mut work = drift.work();
    integrate_forward_with(drift, &mut work, y0, span, tableau, ctrl)
}

/// Fixed-step integration with one of the preset methods.
pub fn integrate_fixed<D: Drift + ?Sized>(
    drift: &D,
    y0: &[f64],
    span: (f64, f64),
    method: Method,
    h: f64,
) -> Result<ForwardTape> {
    integrate_forward(drift, y0, span, &method.tableau(), &StepControl::fixed(h))
}

struct StageBuffers {
    g: Vec<f64>,
    ys: Vec<f64>,
    acc: Vec<f64>,
    y_new: Vec<f64>,
}

/// Computes all stages of one trial step from `y` with step `tau`.
/// Returns false if anything became non-finite.
fn trial_step<D: Drift + ?Sized>(
    drift: &D,
    work: &mut D::Work,
    tab: &ButcherTableau,
    y: &[f64],
    tau: f64,
    first_g: Option<&[f64]>,
    buf: &mut StageBuffers,
) -> bool {
    let d = y.len();
    let s = tab.stages;
    for i in 0..s {
        buf.acc.fill(0.0);
        for j in 0..i {
            let aij = tab.a(i, j);
            if aij != 0.0 {
                let gj = &buf.g[j * d..(j + 1) * d];
                for (acc, gv) in buf.acc.iter_mut().zip(gj) {
                    *acc += aij * gv;
                }
            }
        }
        let yi = &mut buf.ys[i * d..(i + 1) * d];
        for k in 0..d {
            yi[k] = y[k] + tau * buf.acc[k];
        }
        let gi = &mut buf.g[i * d..(i + 1) * d];
        match (i, first_g) {
            (0, Some(g0)) => gi.copy_from_slice(g0),
            _ => drift.eval(yi, gi, work),
        }
        if !gi.iter().all(|v| v.is_finite()) {
            return false;
        }
    }
    buf.acc.fill(0.0);
    for j in 0..s {
        let bj = tab.b[j];
        if bj != 0.0 {
            for (acc, gv) in buf.acc.iter_mut().zip(&buf.g[j * d..(j + 1) * d]) {
                *acc += bj * gv;
            }
        }
    }
    for k in 0..d {
        buf.y_new[k] = y[k] + tau * buf.acc[k];
    }
    buf.y_new.iter().all(|v| v.is_finite())
}

fn error_norm(tab: &ButcherTableau, buf: &StageBuffers, y: &[f64], tau: f64, rtol: f64, atol: f64) -> f64 {
    let d = y.len();
    let bh = tab.b_hat.as_ref().expect("adaptive mode requires embedded weights");
    let mut sum = 0.0;
    for k in 0..d {
        let mut e = 0.0;
        for i in 0..tab.stages {
            let w = tab.b[i] - bh[i];
            if w != 0.0 {
                e += w * buf.g[i * d + k];
            }
        }
        let sc = atol + rtol * y[k].abs().max(buf.y_new[k].abs());
        let r = tau * e / sc;
        sum += r * r;
    }
    (sum / d as f64).sqrt()
}

/// Integrates `ẏ = drift(y)` across `span`, recording every accepted step.
pub fn integrate_forward_with<D: Drift + ?Sized>(
    drift: &D,
    work: &mut D::Work,
    y0: &[f64],
    span: (f64, f64),
    tab: &ButcherTableau,
    ctrl: &StepControl,
) -> Result<ForwardTape> {
    let (ta, tb) = span;
    let d = drift.dim();
    if y0.len() != d {
        return config(format!("initial state has length {}, expected {d}", y0.len()));
    }
    if !(tb > ta) || !ta.is_finite() || !tb.is_finite() {
        return config(format!("invalid span [{ta}, {tb}]"));
    }
    if !y0.iter().all(|v| v.is_finite()) {
        return Err(OcnError::NumericInput("initial state is not finite".into()));
    }
    ctrl.validate()?;
    let len = tb - ta;
    let s = tab.stages;
    let mut buf = StageBuffers {
        g: vec![0.0; s * d],
        ys: vec![0.0; s * d],
        acc: vec![0.0; d],
        y_new: vec![0.0; d],
    };
    let mut steps = Vec::new();
    let mut y = y0.to_vec();
    let mut fsal_g: Option<Vec<f64>> = None;
    let mut rejected = 0;

    match ctrl.mode {
        StepMode::Fixed { h } => {
            let n = (len / h).round();
            if n < 1.0 || (n * h - len).abs() > 1e-9 * len {
                return config(format!("fixed step {h} does not divide span length {len}"));
            }
            let n = n as usize;
            if n > ctrl.max_steps {
                return Err(OcnError::Divergence { t: ta, reason: format!("{n} steps exceed budget") });
            }
            let tau = len / n as f64;
            for l in 0..n {
                let t = ta + l as f64 * tau;
                if !trial_step(drift, work, tab, &y, tau, fsal_g.as_deref(), &mut buf) {
                    return Err(OcnError::BlowUp { t });
                }
                steps.push(StepRecord { t, tau, y: y.clone(), stages: buf.ys.clone() });
                std::mem::swap(&mut y, &mut buf.y_new);
                if tab.fsal {
                    fsal_g = Some(buf.g[(s - 1) * d..].to_vec());
                }
            }
            Ok(ForwardTape {
                t_start: ta,
                t_end: tb,
                dim: d,
                tableau: tab.clone(),
                steps,
                y_end: y,
                h_next: tau,
                rejected: 0,
            })
        }
        StepMode::Adaptive { rtol, atol } => {
            if tab.b_hat.is_none() {
                return config(format!("tableau '{}' has no embedded pair for adaptive stepping", tab.name));
            }
            let h_max = ctrl.h_max.unwrap_or(len).min(len);
            let expo = 1.0 / tab.order as f64;
            let mut h = ctrl.h_init.unwrap_or(h_max).min(h_max);
            let mut t = ta;
            let mut attempts = 0;
            let mut h_next;
            loop {
                attempts += 1;
                if attempts > ctrl.max_steps {
                    return Err(OcnError::Divergence { t, reason: "step budget exhausted".into() });
                }
                let remaining = tb - t;
                let last = h >= remaining * (1.0 - 1e-12);
                let tau = if last { remaining } else { h };
                let ok = trial_step(drift, work, tab, &y, tau, fsal_g.as_deref(), &mut buf);
                let err = if ok { error_norm(tab, &buf, &y, tau, rtol, atol) } else { f64::INFINITY };
                if err <= 1.0 {
                    steps.push(StepRecord { t, tau, y: y.clone(), stages: buf.ys.clone() });
                    std::mem::swap(&mut y, &mut buf.y_new);
                    if tab.fsal {
                        fsal_g = Some(buf.g[(s - 1) * d..].to_vec());
                    }
                    let fac = if err == 0.0 { 5.0 } else { (ctrl.safety * err.powf(-expo)).clamp(0.2, 5.0) };
                    h_next = (tau * fac).max(if last { h } else { 0.0 }).min(h_max);
                    if last {
                        break;
                    }
                    t += tau;
                    h = h_next;
                } else {
                    rejected += 1;
                    let fac = if err.is_finite() { (ctrl.safety * err.powf(-expo)).max(0.2) } else { 0.2 };
                    h = tau * fac.min(1.0);
                    if h < ctrl.h_min {
                        return Err(if ok {
                            OcnError::Divergence { t, reason: format!("step size {h:e} below h_min") }
                        } else {
                            OcnError::BlowUp { t }
                        });
                    }
                }
            }
            Ok(ForwardTape {
                t_start: ta,
                t_end: tb,
                dim: d,
                tableau: tab.clone(),
                steps,
                y_end: y,
                h_next,
                rejected,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::FnDrift;

    fn decay() -> FnDrift<impl Fn(&[f64], &mut [f64])> {
        FnDrift::new(1, |y: &[f64], o: &mut [f64]| o[0] = -y[0])
    }

    #[test]
    fn zero_drift_single_step() {
        let z = FnDrift::new(2, |_: &[f64], o: &mut [f64]| o.fill(0.0));
        let tape = integrate_forward(&z, &[1.5, -2.0], (0.0, 3.0), &ButcherTableau::dopri5(), &StepControl::default()).unwrap();
        assert_eq!(tape.y_end, vec![1.5, -2.0]);
        assert_eq!(tape.steps.len(), 1);
    }

    #[test]
    fn single_dopri5_step_on_decay() {
        let tape = integrate_fixed(&decay(), &[1.0], (0.0, 0.1), Method::Dopri5, 0.1).unwrap();
        assert!((tape.y_end[0] - (-0.1f64).exp()).abs() <= 1e-9);
        assert!((tape.y_end[0] - 0.904_837_4).abs() < 1e-7);
    }

    #[test]
    fn adaptive_linear_gradient_flow_matches_closed_form() {
        let f = FnDrift::new(2, |x: &[f64], o: &mut [f64]| {
            o[0] = -2.0 * x[0] - x[1];
            o[1] = -x[0] - 2.0 * x[1];
        });
        let tape = integrate_forward(&f, &[1.0, 0.0], (0.0, 1.0), &ButcherTableau::dopri5(), &StepControl::adaptive(1e-10, 1e-12)).unwrap();
        // x(t) = ½e^{-3t}(1,1) + ½e^{-t}(1,-1)
        let (e3, e1) = ((-3.0f64).exp(), (-1.0f64).exp());
        let exact = [0.5 * (e3 + e1), 0.5 * (e3 - e1)];
        assert!((tape.y_end[0] - exact[0]).abs() < 1e-9);
        assert!((tape.y_end[1] - exact[1]).abs() < 1e-9);
        assert!((exact[0] - 0.208_833_254_8).abs() < 1e-9 && (exact[1] + 0.159_046_186_4).abs() < 1e-9);
        assert!(tape.steps.len() > 1);
    }

    #[test]
    fn tape_invariants_hold() {
        let f = FnDrift::new(2, |x: &[f64], o: &mut [f64]| {
            o[0] = x[1];
            o[1] = -0.2 * x[1] - 8.91 * x[0].sin();
        });
        let tab = ButcherTableau::dopri5();
        let tape = integrate_forward(&f, &[-1.0, -1.0], (0.3, 2.3), &tab, &StepControl::adaptive(1e-8, 1e-10)).unwrap();
        assert_eq!(tape.steps[0].t, 0.3);
        for w in tape.steps.windows(2) {
            assert!((w[0].t + w[0].tau - w[1].t).abs() <= 1e-15 * w[1].t.abs().max(1.0));
        }
        let last = tape.steps.last().unwrap();
        assert!((last.t + last.tau - 2.3).abs() < 1e-14);
        // replay from the stored stages reproduces the next boundary exactly
        let ys = tape.boundary_states();
        for (l, st) in tape.steps.iter().enumerate() {
            let mut acc = [0.0; 2];
            for i in 0..tab.stages {
                if tab.b[i] != 0.0 {
                    let mut g = [0.0; 2];
                    f.eval(st.stage(i, 2), &mut g, &mut ());
                    acc[0] += tab.b[i] * g[0];
                    acc[1] += tab.b[i] * g[1];
                }
            }
            let next = [st.y[0] + st.tau * acc[0], st.y[1] + st.tau * acc[1]];
            assert_eq!(next.to_vec(), ys[l + 1]);
        }
    }

    fn global_error(method: Method, h: f64) -> f64 {
        let tape = integrate_fixed(&decay(), &[1.0], (0.0, 1.0), method, h).unwrap();
        (tape.y_end[0] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn euler_step_on_linear_gf() {
        let f = FnDrift::new(2, |x: &[f64], o: &mut [f64]| {
            o[0] = -2.0 * x[0] - x[1];
            o[1] = -x[0] - 2.0 * x[1];
        });
        let tape = integrate_fixed(&f, &[1.0, 0.0], (0.0, 0.05), Method::Euler, 0.05).unwrap();
        assert!((tape.y_end[0] - 0.9).abs() < 1e-15 && (tape.y_end[1] + 0.05).abs() < 1e-15);
    }

    #[test]
    fn convergence_orders() {
        let r4 = global_error(Method::Rk4, 0.1) / global_error(Method::Rk4, 0.05);
        assert!((13.0..19.0).contains(&r4), "rk4 ratio {r4}");
        let r5 = global_error(Method::Dopri5, 0.2) / global_error(Method::Dopri5, 0.1);
        assert!((26.0..38.0).contains(&r5), "dopri5 ratio {r5}");
        let r1 = global_error(Method::Euler, 0.01) / global_error(Method::Euler, 0.005);
        assert!((1.9..2.1).contains(&r1), "euler ratio {r1}");
    }

    #[test]
    fn fixed_step_must_divide_span() {
        assert!(integrate_fixed(&decay(), &[1.0], (0.0, 1.0), Method::Rk4, 0.3).is_err());
        let tape = integrate_fixed(&decay(), &[1.0], (0.0, 0.05), Method::Rk4, 0.01).unwrap();
        assert_eq!(tape.steps.len(), 5);
        assert_eq!(tape.t_end, 0.05);
    }

    #[test]
    fn blow_up_and_budget_errors() {
        let f = FnDrift::new(1, |y: &[f64], o: &mut [f64]| o[0] = y[0] * y[0]);
        let r = integrate_fixed(&f, &[1.0], (0.0, 3.0), Method::Rk4, 0.5);
        assert!(matches!(r, Err(OcnError::BlowUp { .. })), "{r:?}");
        let mut ctrl = StepControl::adaptive(1e-8, 1e-10);
        ctrl.max_steps = 5;
        let r = integrate_forward(&f, &[1.0], (0.0, 0.99), &ButcherTableau::dopri5(), &ctrl);
        assert!(matches!(r, Err(OcnError::Divergence { .. })), "{r:?}");
        let r = integrate_forward(&decay(), &[f64::NAN], (0.0, 1.0), &ButcherTableau::dopri5(), &ctrl);
        assert!(r.is_err());
    }

    #[test]
    fn adaptive_requires_embedded_pair() {
        let r = integrate_forward(&decay(), &[1.0], (0.0, 1.0), &ButcherTableau::rk4(), &StepControl::default());
        assert!(matches!(r, Err(OcnError::Config(_))));
    }
}
