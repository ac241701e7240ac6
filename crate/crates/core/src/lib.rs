//! Branching random walks with immigration on a lattice torus.
//!
//! The crate pairs an exact event-driven simulator of the particle field with
//! independent analytic routes to its moments: closed forms, Fourier and
//! convolution-series steady states, a moment-hierarchy ODE assembled from the
//! conditional increment relations, Feynman-Kac solvers for lattice parabolic
//! problems, and explicit stability envelopes for spatially perturbed rates.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dft;
pub mod error;
pub mod feynman_kac;
pub mod hierarchy;
pub mod kernel;
pub mod lyapunov;
pub mod model;
pub mod moments;
pub mod ode;
pub mod rng;
pub mod simulator;

pub use error::{BrwError, Result};
pub use kernel::{KernelSpec, LatticeOffset, TorusGrid, TorusKernel};
pub use model::{BranchingLaw, Criticality, InitialCondition, ModelParams, SpatialModel};
pub use rng::Estimate;

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
