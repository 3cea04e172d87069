//! A small laboratory for late-interaction (multi-vector) retrieval.
//!
//! The crate covers the whole loop of studying projection heads for
//! MaxSim-scored token embeddings: a dense reverse-mode [`autodiff`] engine,
//! the [`heads`] themselves, [`maxsim`] scoring, KL-distillation
//! [`train`]ing, exact-search [`eval`]uation, algebraic [`diagnostics`],
//! synthetic [`data`] with planted structure, and the [`cli`] that ties
//! them into reproducible experiments.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod heads;
pub mod maxsim;
pub mod rng;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};

/// Version stamped into every output file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
