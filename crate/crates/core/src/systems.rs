//! Ground-truth dynamical systems, initial-point sampling and dataset
//! generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, OcnError, Result};
use crate::field::FieldMode;
use crate::solver::{ButcherTableau, Drift, StepControl};
use crate::train::{Dataset, DatasetMeta, GeneratorInfo, Trajectory};

/// Known systems with closed-form right-hand sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum System {
    /// `f = x₁² + x₁x₂ + x₂²`, `ẋ = -∇f`.
    LinearGf,
    /// `f = sin x₁ cos x₂`, `ẋ = -∇f`.
    NonlinearGf,
    /// Damped pendulum `ẋ₁ = x₂, ẋ₂ = -0.2x₂ - 8.91 sin x₁`.
    Pendulum,
    Lorenz { sigma: f64, rho: f64, beta: f64 },
}

pub const PENDULUM_DAMPING: f64 = 0.2;
pub const PENDULUM_GRAVITY: f64 = 8.91;

impl System {
    pub fn lorenz() -> Self {
        System::Lorenz { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear-gf" => Ok(System::LinearGf),
            "nonlinear-gf" => Ok(System::NonlinearGf),
            "pendulum" => Ok(System::Pendulum),
            "lorenz" => Ok(System::lorenz()),
            other => config(format!("unknown system '{other}'")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            System::LinearGf => "linear-gf",
            System::NonlinearGf => "nonlinear-gf",
            System::Pendulum => "pendulum",
            System::Lorenz { .. } => "lorenz",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            System::Lorenz { .. } => 3,
            _ => 2,
        }
    }

    pub fn is_gradient_flow(&self) -> bool {
        matches!(self, System::LinearGf | System::NonlinearGf)
    }

    pub fn true_drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.drift_into(x, &mut out);
        out
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            System::LinearGf => {
                out[0] = -2.0 * x[0] - x[1];
                out[1] = -x[0] - 2.0 * x[1];
            }
            System::NonlinearGf => {
                out[0] = -x[0].cos() * x[1].cos();
                out[1] = x[0].sin() * x[1].sin();
            }
            System::Pendulum => {
                out[0] = x[1];
                out[1] = -PENDULUM_DAMPING * x[1] - PENDULUM_GRAVITY * x[0].sin();
            }
            System::Lorenz { sigma, rho, beta } => {
                out[0] = sigma * (x[1] - x[0]);
                out[1] = x[0] * (rho - x[2]) - x[1];
                out[2] = x[0] * x[1] - beta * x[2];
            }
        }
    }

    pub fn true_potential(&self, x: &[f64]) -> Result<f64> {
        match self {
            System::LinearGf => Ok(x[0] * x[0] + x[0] * x[1] + x[1] * x[1]),
            System::NonlinearGf => Ok(x[0].sin() * x[1].cos()),
            other => Err(OcnError::Unsupported(format!("{} is not a gradient flow", other.name()))),
        }
    }

    /// `x₂²/2 + 8.91(1 − cos x₁)`; non-increasing along pendulum trajectories.
    pub fn pendulum_energy(x: &[f64]) -> f64 {
        0.5 * x[1] * x[1] + PENDULUM_GRAVITY * (1.0 - x[0].cos())
    }
}

impl Drift for System {
    type Work = ();

    fn dim(&self) -> usize {
        System::dim(self)
    }

    fn work(&self) {}

    fn eval(&self, y: &[f64], out: &mut [f64], _: &mut ()) {
        self.drift_into(y, out)
    }
}

/// Region initial points are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Domain {
    /// Axis-aligned box `[lo_i, hi_i]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Closed Euclidean ball.
    Ball { center: Vec<f64>, radius: f64 },
    /// Explicit initial points (sampling returns them in order, cycling).
    Points { points: Vec<Vec<f64>> },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { lo, .. } => lo.len(),
            Domain::Ball { center, .. } => center.len(),
            Domain::Points { points } => points.first().map_or(0, |p| p.len()),
        }
    }
}

/// Draws `m` i.i.d. uniform points from `domain`, deterministically in `seed`.
pub fn sample_initials(domain: &Domain, m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if m == 0 {
        return config("need at least one initial point");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match domain {
        Domain::Box { lo, hi } => {
            if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                return config("degenerate sampling box");
            }
            Ok((0..m)
                .map(|_| lo.iter().zip(hi).map(|(a, b)| rng.random_range(*a..*b)).collect())
                .collect())
        }
        Domain::Ball { center, radius } => {
            if center.is_empty() || !(*radius > 0.0) {
                return config("degenerate sampling ball");
            }
            let d = center.len();
            Ok((0..m)
                .map(|_| {
                    // uniform direction, radius ∝ U^{1/d}
                    let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
                    center.iter().zip(&dir).map(|(c, u)| c + r * u / norm).collect()
                })
                .collect())
        }
        Domain::Points { points } => {
            if points.is_empty() {
                return config("empty point list");
            }
            Ok((0..m).map(|i| points[i % points.len()].clone()).collect())
        }
    }
}

/// Generator tolerances for ground-truth data.
pub const GEN_RTOL: f64 = 1e-10;
pub const GEN_ATOL: f64 = 1e-12;

pub fn generator_control() -> StepControl {
    StepControl::adaptive(GEN_RTOL, GEN_ATOL)
}

/// Integrates `drift` from `x0`, recording the state at every multiple of `dt`.
pub fn sample_trajectory<D: Drift + ?Sized>(
    drift: &D,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    ctrl: &StepControl,
) -> Result<Vec<Vec<f64>>> {
    let n = intervals(horizon, dt)?;
    let tab = ButcherTableau::dopri5();
    let mut work = drift.work();
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.to_vec());
    let mut ctrl = *ctrl;
    for i in 0..n {
        let span = (i as f64 * dt, (i + 1) as f64 * dt);
        let tape = crate::solver::integrate_forward_with(drift, &mut work, states.last().unwrap(), span, &tab, &ctrl)?;
        ctrl.h_init = Some(tape.h_next);
        states.push(tape.y_end);
    }
    Ok(states)
}

pub(crate) fn intervals(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && horizon > 0.0) {
        return config("horizon and dt must be positive");
    }
    let n = (horizon / dt).round();
    if n < 1.0 || (n * dt - horizon).abs() > 1e-9 * horizon {
        return config(format!("horizon {horizon} is not a multiple of dt {dt}"));
    }
    Ok(n as usize)
}

/// Builds a dataset by integrating the true system from each initial point.
pub fn generate_dataset(
    system: &System,
    initials: &[Vec<f64>],
    horizon: f64,
    dt: f64,
    ctrl: &StepControl,
    seed: Option<u64>,
) -> Result<Dataset> {
    let mut trajectories = Vec::with_capacity(initials.len());
    for (k, x0) in initials.iter().enumerate() {
        if x0.len() != system.dim() {
            return config(format!("initial point {k} has dimension {}, expected {}", x0.len(), system.dim()));
        }
        let states = sample_trajectory(system, x0, horizon, dt, ctrl)
            .map_err(|e| OcnError::Generation { trajectory: k, source: Box::new(e) })?;
        trajectories.push(Trajectory::new(0.0, states));
    }
    let (rtol, atol) = match ctrl.mode {
        crate::solver::StepMode::Adaptive { rtol, atol } => (rtol, atol),
        crate::solver::StepMode::Fixed { .. } => (0.0, 0.0),
    };
    Dataset::new(
        dt,
        trajectories,
        DatasetMeta {
            system: system.name().to_string(),
            seed,
            generator: Some(GeneratorInfo { method: "dopri5".into(), rtol, atol }),
        },
    )
}

/// Named experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub system: System,
    pub domain: Domain,
    pub m: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    pub dims: Vec<usize>,
    pub mode: FieldMode,
}

/// Seed used by every preset for initial-point sampling.
pub const PRESET_SEED: u64 = 2024;

pub const PRESET_NAMES: [&str; 6] =
    ["linear-gf", "nonlinear-gf", "pendulum", "lorenz-short", "lorenz-long", "lorenz-ball"];

pub fn preset(name: &str) -> Result<Preset> {
    let lorenz_net = vec![3, 300, 300, 300, 3];
    let p = match name {
        "linear-gf" => Preset {
            name: "linear-gf",
            system: System::LinearGf,
            domain: Domain::Box { lo: vec![-2.0, -2.0], hi: vec![2.0, 2.0] },
            m: 8,
            horizon: 5.0,
            dt: 0.05,
            seed: PRESET_SEED,
            dims: vec![2, 50, 50, 1],
            mode: FieldMode::Scalar,
        },
        "nonlinear-gf" => Preset {
            name: "nonlinear-gf",
            system: System::NonlinearGf,
            domain: Domain::Box { lo: vec![-6.0, -4.0], hi: vec![6.0, 6.0] },
            m: 24,
            horizon: 8.0,
            dt: 0.05,
            seed: PRESET_SEED,
            dims: vec![2, 200, 200, 1],
            mode: FieldMode::Scalar,
        },
        "pendulum" => Preset {
            name: "pendulum",
            system: System::Pendulum,
            domain: Domain::Points { points: vec![vec![-1.0, -1.0]] },
            m: 1,
            horizon: 5.0,
            dt: 0.05,
            seed: PRESET_SEED,
            dims: vec![2, 100, 2],
            mode: FieldMode::Vector,
        },
        "lorenz-short" => Preset {
            name: "lorenz-short",
            system: System::lorenz(),
            domain: Domain::Points { points: vec![vec![10.0, 15.0, 17.0]] },
            m: 1,
            horizon: 1.5,
            dt: 0.01,
            seed: PRESET_SEED,
            dims: lorenz_net,
            mode: FieldMode::Vector,
        },
        "lorenz-long" => Preset {
            name: "lorenz-long",
            system: System::lorenz(),
            domain: Domain::Points { points: vec![vec![-8.0, 8.0, 27.0]] },
            m: 1,
            horizon: 20.0,
            dt: 0.01,
            seed: PRESET_SEED,
            dims: lorenz_net,
            mode: FieldMode::Vector,
        },
        "lorenz-ball" => Preset {
            name: "lorenz-ball",
            system: System::lorenz(),
            domain: Domain::Ball { center: vec![10.0, 15.0, 17.0], radius: 1.0 },
            m: 3,
            horizon: 3.0,
            dt: 0.01,
            seed: PRESET_SEED,
            dims: lorenz_net,
            mode: FieldMode::Vector,
        },
        other => return config(format!("unknown preset '{other}'")),
    };
    Ok(p)
}

impl Preset {
    pub fn initials(&self) -> Result<Vec<Vec<f64>>> {
        sample_initials(&self.domain, self.m, self.seed)
    }

    pub fn generate(&self) -> Result<Dataset> {
        generate_dataset(&self.system, &self.initials()?, self.horizon, self.dt, &generator_control(), Some(self.seed))
    }
}
