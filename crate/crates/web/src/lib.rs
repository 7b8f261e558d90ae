//! WebAssembly bindings for the demo page in `www/`.
//!
//! Everything is exposed as flat `f64` arrays so the page can draw straight
//! from typed arrays. The `*_impl` functions carry the logic and are what the
//! native tests exercise; the exported wrappers only convert errors.

use ocn::diag::sample_flow;
use ocn::solver::{adjoint_sweep, integrate_fixed, variational_sweep, Method};
use ocn::systems::{generate_dataset, generator_control, preset, System};
use ocn::train::{OptimizerSpec, SolverSpec, TrainConfig, Trainer};
use ocn::{FieldMode, MlpField, OcnError};
use wasm_bindgen::prelude::*;

fn js(e: OcnError) -> JsError {
    JsError::new(&e.to_string())
}

fn flatten(rows: Vec<Vec<f64>>) -> Vec<f64> {
    rows.into_iter().flatten().collect()
}

pub fn simulate_impl(system: &str, x0: &[f64], horizon: f64, dt: f64) -> ocn::Result<Vec<f64>> {
    let sys = System::from_name(system)?;
    Ok(flatten(sample_flow(&sys, x0, horizon, dt)?))
}

/// True trajectory of a named system, sampled every `dt`: `[x(0), x(dt), ...]`
/// with the coordinates of each state adjacent.
#[wasm_bindgen]
pub fn simulate(system: &str, x0: &[f64], horizon: f64, dt: f64) -> Result<Vec<f64>, JsError> {
    simulate_impl(system, x0, horizon, dt).map_err(js)
}

/// Relative change of `δ·p` at each step of a random field's trajectory,
/// next to the same quantity with the co-state pulled back by a plain
/// explicit Euler step (which does not conserve it). Returns
/// `[exact_0, naive_0, exact_1, naive_1, ...]`.
pub fn invariant_series_impl(dim: usize, seed: u64, steps: usize) -> ocn::Result<Vec<f64>> {
    let field = MlpField::init(&[dim, 16, dim], FieldMode::Vector, seed)?;
    let y0: Vec<f64> = (0..dim).map(|i| 0.5 - 0.3 * i as f64).collect();
    let h = 0.05;
    let tape = integrate_fixed(&field, &y0, (0.0, h * steps as f64), Method::Dopri5, h)?;
    let p_end: Vec<f64> = (0..dim).map(|i| 1.0 - 0.5 * i as f64).collect();
    let delta0: Vec<f64> = (0..dim).map(|i| if i == 0 { 1.0 } else { 0.25 }).collect();
    let p = adjoint_sweep(&tape, &field, &p_end)?.p_steps;
    let delta = variational_sweep(&tape, &field, &delta0)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    // naive co-state: p_k = p_{k+1} + h·J(y_{k+1})ᵀ p_{k+1}
    let ys = tape.boundary_states();
    let mut naive = vec![p_end.clone()];
    for k in (0..steps).rev() {
        let q = naive.last().unwrap();
        let jt = field.drift_jacobian_transpose_apply(&ys[k + 1], q)?;
        naive.push(q.iter().zip(&jt).map(|(a, b)| a + h * b).collect());
    }
    naive.reverse();

    let s_end = dot(&delta[steps], &p[steps]);
    let mut out = Vec::with_capacity(2 * (steps + 1));
    for k in 0..=steps {
        out.push((dot(&delta[k], &p[k]) - s_end).abs() / s_end.abs().max(1.0));
        out.push((dot(&delta[k], &naive[k]) - s_end).abs() / s_end.abs().max(1.0));
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn invariant_series(dim: usize, seed: u64, steps: usize) -> Result<Vec<f64>, JsError> {
    invariant_series_impl(dim, seed, steps).map_err(js)
}

/// An interactive training run on a preset's data with a small network.
#[wasm_bindgen]
pub struct Session {
    system: System,
    dt: f64,
    horizon: f64,
    trainer: Trainer<'static>,
}

impl Session {
    pub fn create(name: &str, hidden: usize, trajectories: usize, seed: u64) -> ocn::Result<Session> {
        let p = preset(name)?;
        let initials = p.initials()?;
        let take = trajectories.clamp(1, initials.len());
        let ds = generate_dataset(&p.system, &initials[..take], p.horizon, p.dt, &generator_control(), Some(p.seed))?;
        let d = p.system.dim();
        let out = match p.mode {
            FieldMode::Scalar => 1,
            FieldMode::Vector => d,
        };
        let dims = [d, hidden, hidden, out];
        let mut cfg = TrainConfig::new(&dims, p.mode);
        cfg.optimizer = OptimizerSpec::adam(1e-2, usize::MAX);
        cfg.objective.solver = SolverSpec::fixed(Method::Dopri5, p.dt);
        cfg.threshold = Some(0.0);
        cfg.seed = seed;
        let field = MlpField::init(&dims, p.mode, seed)?;
        Ok(Session { system: p.system, dt: p.dt, horizon: p.horizon, trainer: Trainer::owned(&cfg, ds, field)? })
    }

    /// Runs `n` optimiser updates and returns the loss afterwards.
    pub fn advance(&mut self, n: usize) -> ocn::Result<f64> {
        for _ in 0..n {
            self.trainer.step()?;
        }
        Ok(self.trainer.loss())
    }

    pub fn predict_impl(&self, x0: &[f64], horizon: f64) -> ocn::Result<Vec<f64>> {
        Ok(flatten(sample_flow(self.trainer.field(), x0, horizon, self.dt)?))
    }

    /// Learned potential on an `n × n` grid over `[lo, hi]²`, row by row.
    pub fn potential_grid_impl(&self, lo: f64, hi: f64, n: usize) -> ocn::Result<Vec<f64>> {
        let f = self.trainer.field();
        let step = (hi - lo) / (n.max(2) - 1) as f64;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(f.potential(&[lo + j as f64 * step, hi - i as f64 * step])?);
            }
        }
        Ok(out)
    }
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(name: &str, hidden: usize, trajectories: usize, seed: u64) -> Result<Session, JsError> {
        Session::create(name, hidden, trajectories, seed).map_err(js)
    }

    pub fn step(&mut self, n: usize) -> Result<f64, JsError> {
        self.advance(n).map_err(js)
    }

    pub fn loss(&self) -> f64 {
        self.trainer.loss()
    }

    pub fn iteration(&self) -> usize {
        self.trainer.iteration()
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn is_scalar(&self) -> bool {
        self.trainer.field().mode() == FieldMode::Scalar
    }

    pub fn trajectory_count(&self) -> usize {
        self.trainer.dataset().len()
    }

    /// Training states, trajectory after trajectory.
    pub fn data(&self) -> Vec<f64> {
        flatten(self.trainer.dataset().trajectories.iter().flat_map(|t| t.states.clone()).collect())
    }

    pub fn predict(&self, x0: &[f64], horizon: f64) -> Result<Vec<f64>, JsError> {
        self.predict_impl(x0, horizon).map_err(js)
    }

    pub fn truth(&self, x0: &[f64], horizon: f64) -> Result<Vec<f64>, JsError> {
        simulate_impl(self.system.name(), x0, horizon, self.dt).map_err(js)
    }

    pub fn potential_grid(&self, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, JsError> {
        self.potential_grid_impl(lo, hi, n).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_has_one_state_per_sample() {
        let xs = simulate_impl("pendulum", &[-1.0, -1.0], 1.0, 0.05).unwrap();
        assert_eq!(xs.len(), 2 * 21);
        assert_eq!(&xs[..2], &[-1.0, -1.0]);
        assert!(simulate_impl("duffing", &[0.0], 1.0, 0.1).is_err());
    }

    #[test]
    fn symplectic_pullback_beats_naive() {
        let s = invariant_series_impl(2, 3, 40).unwrap();
        let exact = s.iter().step_by(2).cloned().fold(0.0, f64::max);
        let naive = s.iter().skip(1).step_by(2).cloned().fold(0.0, f64::max);
        assert!(exact < 1e-12, "{exact}");
        assert!(naive > 1e-6, "{naive}");
    }

    #[test]
    fn session_trains_and_predicts() {
        let mut s = Session::create("linear-gf", 8, 2, 1).unwrap();
        let j0 = s.loss();
        let j = s.advance(15).unwrap();
        assert!(j < j0);
        assert_eq!(s.trainer.iteration(), 15);
        assert_eq!(s.predict_impl(&[1.0, 0.5], 1.0).unwrap().len(), 2 * 21);
        assert_eq!(s.potential_grid_impl(-2.0, 2.0, 5).unwrap().len(), 25);
        assert_eq!(s.trainer.dataset().len(), 2);
    }
}
