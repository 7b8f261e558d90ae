//! Explicit Runge–Kutta integration with stage recording, and the backward
//! sweeps (co-state/gradient and variational) that replay a recorded tape.

mod integrate;
mod sweep;
mod tableau;

pub use integrate::{
    integrate_fixed, integrate_forward, integrate_forward_with, ForwardTape, StepControl,
    StepMode, StepRecord,
};
pub use sweep::{
    adjoint_sweep, adjoint_sweep_into, flow_jacobian, variational_sweep, AdjointSweep,
};
pub use tableau::{ButcherTableau, Method};

/// Autonomous right-hand side `y ↦ F(y)`.
///
/// `Work` is scratch storage reused across evaluations so the integrator
/// runs without per-stage allocation.
pub trait Drift {
    type Work;

    fn dim(&self) -> usize;
    fn work(&self) -> Self::Work;
    fn eval(&self, y: &[f64], out: &mut [f64], work: &mut Self::Work);
}

/// Adapts a closure `(y, out)` into a [`Drift`].
pub struct FnDrift<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64])> FnDrift<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnDrift { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64])> Drift for FnDrift<F> {
    type Work = ();

    fn dim(&self) -> usize {
        self.dim
    }

    fn work(&self) {}

    fn eval(&self, y: &[f64], out: &mut [f64], _: &mut ()) {
        (self.f)(y, out)
    }
}
