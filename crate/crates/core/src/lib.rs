//! Learning dynamical systems from sampled trajectories by optimal control.
//!
//! A tanh network is trained as either a scalar potential (gradient-flow
//! dynamics `ẏ = -∇G(y)`) or a vector field (`ẏ = G(y)`). The training loss
//! compares integrated surrogate trajectories against observations, and its
//! gradient comes from a partitioned Runge–Kutta co-state sweep that is the
//! exact discrete adjoint of the forward solver.

pub mod diag;
pub mod error;
pub mod field;
pub mod io;
pub mod solver;
pub mod systems;
pub mod train;

pub use error::{OcnError, Result};
pub use field::{FieldMode, MlpField, ParamVector};
