//! Loss-landscape analysis for deep linear networks.
//!
//! The crate trains deep linear networks under squared-error loss, solves
//! the rank-constrained relaxed problem in closed form, certifies critical
//! points as global minima or saddle points through rank and subspace
//! tests, constructs strict-ascent witnesses at saddles, and numerically
//! probes analogous sufficient conditions for nonlinear layer pipelines.

pub mod certify;
pub mod error;
pub mod escape;
pub mod linalg;
pub mod net;
pub mod probe;
pub mod relaxed;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{Mat, Tolerances};
