//! Constrained SEIR epidemic control.
//!
//! The crate simulates the controlled SEIR compartmental model under a hard
//! infection cap, computes membership oracles and boundary point clouds for
//! the admissible set and the maximal robust positively invariant set (MRPI),
//! solves a finite-horizon optimal control problem with terminal cost and
//! terminal set, and runs the receding-horizon MPC loop on top of it.
//!
//! Layout:
//! - [`model`]: vector field, constraint predicates, stage cost, linearized tail.
//! - [`integrate`]: fixed-step RK4 under piecewise-constant controls.
//! - [`sets`]: terminal set, membership oracles, barrier boundary clouds.
//! - [`ocp`]: single-shooting transcription and augmented-Lagrangian solve.
//! - [`mpc`]: receding-horizon loop, warm-start shifting, feasible-control
//!   synthesis.
//! - [`experiments`]: scenario files, CSV artifacts, figure reproduction.
//!
//! With the default `parallel` feature, embarrassingly parallel work (oracle
//! sampling, grid sweeps, multi-start boundary curves, finite-difference
//! gradients) runs on rayon; disabling the feature yields a dependency-free
//! sequential build with identical outputs.

pub mod error;
pub mod experiments;
pub mod integrate;
pub mod model;
pub mod mpc;
pub mod ocp;
pub mod par;
pub mod sets;

pub use error::{Error, Result};
pub use integrate::{ControlSignal, Trajectory};
pub use model::{ControlValue, Params, State};
