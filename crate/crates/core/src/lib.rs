//! Tracking of time-varying graph signals by Kalman filtering in the graph
//! spectral domain, with the per-step vertex sampling sets chosen by a
//! two-step budget-allocation optimizer.
//!
//! The crate is organized bottom-up:
//!
//! * [`graph`] — weighted graphs, Laplacians, the graph Fourier transform,
//!   and the random graph generators used by the experiments.
//! * [`dynamics`] — signal evolution models (spectral operators, bounded
//!   -confidence opinion updates) and the noisy vertex-sampling observation.
//! * [`kalman`] — the predict/update recursion on spectral coefficients.
//! * [`optimizer`] — the relaxed two-step sampling-design problem: objective,
//!   gradient, feasible projection, projected-gradient solver, and numerical
//!   curvature/monotonicity checkers.
//! * [`policies`] — sampling policies: the optimizer-driven one plus
//!   greedy, information-gain, and random baselines.
//! * [`harness`] — reproducible experiment scenarios, NMSE bookkeeping, and
//!   report serialization.

pub mod dynamics;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kalman;
mod linalg;
pub mod optimizer;
pub mod policies;

pub use error::{Error, Result};
