use serde::{Deserialize, Serialize};

use crate::error::{config, OcnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Gd,
    Adam,
    /// Limited-memory BFGS with a backtracking Armijo line search.
    Lbfgs,
}

impl std::str::FromStr for OptimizerKind {
    type Err = OcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(OptimizerKind::Gd),
            "adam" => Ok(OptimizerKind::Adam),
            "lbfgs" => Ok(OptimizerKind::Lbfgs),
            other => config(format!("unknown optimizer '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    /// Step size; for L-BFGS the initial line-search step.
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Iteration budget.
    pub iterations: usize,
    /// L-BFGS history length.
    pub memory: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            eta: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 1000,
            memory: 10,
        }
    }
}

impl OptimizerSpec {
    pub fn gd(eta: f64, iterations: usize) -> Self {
        OptimizerSpec { kind: OptimizerKind::Gd, eta, iterations, ..Default::default() }
    }

    pub fn adam(eta: f64, iterations: usize) -> Self {
        OptimizerSpec { kind: OptimizerKind::Adam, eta, iterations, ..Default::default() }
    }

    pub fn lbfgs(iterations: usize) -> Self {
        OptimizerSpec { kind: OptimizerKind::Lbfgs, eta: 1.0, iterations, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return config(format!("step size must be positive, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config("moment decay rates must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return config("eps must be positive");
        }
        if self.kind == OptimizerKind::Lbfgs && self.memory == 0 {
            return config("L-BFGS memory must be at least 1");
        }
        Ok(())
    }
}

/// Mutable optimizer state carried across iterations.
#[derive(Debug, Clone)]
pub enum OptimizerState {
    Gd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u32 },
    Lbfgs(LbfgsMemory),
}

impl OptimizerState {
    pub fn new(spec: &OptimizerSpec, n: usize) -> Self {
        match spec.kind {
            OptimizerKind::Gd => OptimizerState::Gd,
            OptimizerKind::Adam => OptimizerState::Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 },
            OptimizerKind::Lbfgs => OptimizerState::Lbfgs(LbfgsMemory::default()),
        }
    }
}

fn check_grad(params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() {
        return config(format!("gradient has length {}, expected {}", grad.len(), params.len()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(OcnError::NumericInput(format!("non-finite gradient component {i}")));
    }
    Ok(())
}

/// One first-order update in place. L-BFGS needs function values and goes
/// through [`lbfgs_step`] instead.
pub fn optimizer_step(params: &mut [f64], grad: &[f64], state: &mut OptimizerState, spec: &OptimizerSpec) -> Result<()> {
    check_grad(params, grad)?;
    match state {
        OptimizerState::Gd => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= spec.eta * g;
            }
        }
        OptimizerState::Adam { m, v, t } => {
            *t += 1;
            let c1 = 1.0 - spec.beta1.powi(*t as i32);
            let c2 = 1.0 - spec.beta2.powi(*t as i32);
            for i in 0..params.len() {
                let g = grad[i];
                m[i] = spec.beta1 * m[i] + (1.0 - spec.beta1) * g;
                v[i] = spec.beta2 * v[i] + (1.0 - spec.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                params[i] -= spec.eta * mh / (vh.sqrt() + spec.eps);
            }
        }
        OptimizerState::Lbfgs(_) => return config("L-BFGS updates need a line search"),
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct LbfgsMemory {
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

impl LbfgsMemory {
    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let k = self.s.len();
        let mut q = grad.to_vec();
        let mut alpha = vec![0.0; k];
        let rho: Vec<f64> = (0..k).map(|i| 1.0 / dot(&self.y[i], &self.s[i])).collect();
        for i in (0..k).rev() {
            alpha[i] = rho[i] * dot(&self.s[i], &q);
            axpy(-alpha[i], &self.y[i], &mut q);
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|x| *x *= gamma);
        }
        for i in 0..k {
            let beta = rho[i] * dot(&self.y[i], &q);
            axpy(alpha[i] - beta, &self.s[i], &mut q);
        }
        q.iter_mut().for_each(|x| *x = -*x);
        q
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Result of an L-BFGS iteration.
#[derive(Debug, Clone)]
pub enum LbfgsOutcome {
    /// Accepted point with its loss and gradient.
    Moved { params: Vec<f64>, loss: f64, grad: Vec<f64> },
    /// No decrease found even along steepest descent.
    Stalled,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACK: usize = 40;

/// One L-BFGS iteration from `(params, loss, grad)`; `objective` returns the
/// loss and gradient at a trial point. Trial failures (e.g. solver blow-up)
/// count as no decrease.
pub fn lbfgs_step(
    params: &[f64],
    loss: f64,
    grad: &[f64],
    mem: &mut LbfgsMemory,
    spec: &OptimizerSpec,
    objective: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<LbfgsOutcome> {
    check_grad(params, grad)?;
    for attempt in 0..2 {
        let mut dir = mem.direction(grad);
        let mut slope = dot(&dir, grad);
        if !(slope < 0.0) {
            mem.s.clear();
            mem.y.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(grad, grad);
        }
        if slope == 0.0 {
            return Ok(LbfgsOutcome::Stalled);
        }
        let mut step = if mem.s.is_empty() {
            (spec.eta / dot(&dir, &dir).sqrt()).min(spec.eta)
        } else {
            spec.eta
        };
        for _ in 0..MAX_BACKTRACK {
            let trial: Vec<f64> = params.iter().zip(&dir).map(|(p, d)| p + step * d).collect();
            if let Ok((f, g)) = objective(&trial) {
                if f.is_finite() && g.iter().all(|v| v.is_finite()) && f <= loss + ARMIJO_C * step * slope {
                    let s: Vec<f64> = trial.iter().zip(params).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = g.iter().zip(grad).map(|(a, b)| a - b).collect();
                    if dot(&s, &y) > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                        if mem.s.len() == spec.memory {
                            mem.s.remove(0);
                            mem.y.remove(0);
                        }
                        mem.s.push(s);
                        mem.y.push(y);
                    }
                    return Ok(LbfgsOutcome::Moved { params: trial, loss: f, grad: g });
                }
            }
            step *= 0.5;
        }
        if attempt == 0 && mem.s.is_empty() {
            break;
        }
        mem.s.clear();
        mem.y.clear();
    }
    Ok(LbfgsOutcome::Stalled)
}
