use serde::{Deserialize, Serialize};

use crate::error::{config, OcnError, Result};

/// One observed trajectory `x_0 … x_n` sampled every `dt` from `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(t0: f64, states: Vec<Vec<f64>>) -> Self {
        Trajectory { t0, states }
    }

    pub fn time(&self, i: usize, dt: f64) -> f64 {
        self.t0 + i as f64 * dt
    }
}

/// Provenance recorded alongside a dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub system: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub generator: Option<GeneratorInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub method: String,
    pub rtol: f64,
    pub atol: f64,
}

/// Uniformly sampled trajectories sharing dimension, length and spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dt: f64,
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(dt: f64, trajectories: Vec<Trajectory>, meta: DatasetMeta) -> Result<Self> {
        let ds = Dataset { dt, trajectories, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return config(format!("dt must be positive, got {}", self.dt));
        }
        let Some(first) = self.trajectories.first() else {
            return config("dataset has no trajectories");
        };
        let n = first.states.len();
        if n < 2 {
            return config("trajectories need at least two samples");
        }
        let d = first.states[0].len();
        if d == 0 {
            return config("state dimension must be positive");
        }
        for (k, tr) in self.trajectories.iter().enumerate() {
            if tr.states.len() != n {
                return config(format!("trajectory {k} has {} samples, expected {n}", tr.states.len()));
            }
            if tr.states.iter().any(|x| x.len() != d) {
                return config(format!("trajectory {k} has inconsistent state dimension"));
            }
            if tr.states.iter().flatten().any(|v| !v.is_finite()) {
                return Err(OcnError::NumericInput(format!("trajectory {k} has non-finite states")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.trajectories[0].states[0].len()
    }

    /// Number of intervals `n` per trajectory.
    pub fn intervals(&self) -> usize {
        self.trajectories[0].states.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.intervals() as f64 * self.dt
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Number of observed residual points `m · n`.
    pub fn residual_points(&self) -> usize {
        self.len() * self.intervals()
    }

    pub fn initial_points(&self) -> Vec<Vec<f64>> {
        self.trajectories.iter().map(|t| t.states[0].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let ok = Dataset::new(0.1, vec![Trajectory::new(0.0, vec![vec![0.0, 1.0], vec![0.5, 0.5]])], DatasetMeta::default());
        assert!(ok.is_ok());
        let ds = ok.unwrap();
        assert_eq!((ds.dim(), ds.intervals(), ds.residual_points()), (2, 1, 1));
        let ragged = Dataset::new(
            0.1,
            vec![
                Trajectory::new(0.0, vec![vec![0.0], vec![1.0]]),
                Trajectory::new(0.0, vec![vec![0.0], vec![1.0], vec![2.0]]),
            ],
            DatasetMeta::default(),
        );
        assert!(ragged.is_err());
        let nan = Dataset::new(0.1, vec![Trajectory::new(0.0, vec![vec![0.0], vec![f64::NAN]])], DatasetMeta::default());
        assert!(matches!(nan, Err(OcnError::NumericInput(_))));
        assert!(Dataset::new(0.0, vec![Trajectory::new(0.0, vec![vec![0.0], vec![1.0]])], DatasetMeta::default()).is_err());
    }
}
