//! Knockoff boosted trees.
//!
//! Model-free variable selection with false discovery rate control: draw
//! knockoff copies of the design, fit regularized gradient-boosted trees on
//! originals and knockoffs together, compare per-feature importances, and
//! select features whose importance beats their knockoff by more than the
//! knockoff+ threshold allows by chance.

pub mod bayes_opt;
pub mod boost;
pub mod data;
pub mod error;
pub mod importance;
pub mod knockoff;
pub mod knockoff_filter;
mod linalg;
pub mod rng;
pub mod sim_harness;

pub use data::{DataMatrix, Dataset, Task};
pub use error::{KobtError, Result};
pub use rng::RngStream;

/// Library version, recorded in run provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
