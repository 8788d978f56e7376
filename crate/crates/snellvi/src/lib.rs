//! American-style option pricing on general multidimensional diffusions.
//!
//! The crate prices the same optimal-stopping problem along two independent
//! routes and cross-checks them:
//!
//! * [`vi`] solves the parabolic variational inequality (an obstacle problem)
//!   on a space-time grid as a backward sequence of linear complementarity
//!   problems;
//! * [`snell`] computes the Snell envelope by simulation: chain dynamic
//!   programming, least-squares Monte Carlo, and direct evaluation of
//!   stopping rules on simulated paths.
//!
//! [`wiener`] audits the standing hypotheses that make the two routes agree
//! (Malliavin nondegeneracy, a Hörmander bracket-rank surrogate for
//! hypoellipticity) and provides desk-scale probes of the Wiener-space
//! machinery (Ornstein-Uhlenbeck smoothing, a local-time/Tanaka identity).
//! [`density`] estimates where the transition density is positive, which
//! delimits where the equivalence is claimed. [`harness`] orchestrates the
//! whole verification and [`cli`] exposes it as a command-line tool.

pub mod cli;
pub mod density;
pub mod error;
pub mod grid;
pub mod harness;
mod linalg;
pub mod model;
pub mod sim;
pub mod snell;
pub mod vi;
pub mod wiener;

pub use error::{Error, Result};
pub use grid::{BoundaryPolicy, GeneratorStencil, SpaceTimeGrid};
pub use model::{build_model, DiffusionModel, ModelConfig, PayoffSpec};
pub use sim::{simulate_paths, DiscountPath, FirstVariationFlow, PathBatch};
pub use snell::{PriceEstimate, StoppingRule};
pub use vi::{solve_backward, RegionKind, RegionMask, ValueSurface};
