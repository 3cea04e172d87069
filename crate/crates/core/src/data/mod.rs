//! Synthetic distillation data with planted structure, and the
//! line-delimited JSON formats for tuples, queries and corpora.

mod io;
mod synth;

pub use io::{load_corpus, load_queries, load_tuples, write_corpus, write_queries, write_tuples, Loaded};
pub use synth::{generate_synthetic, SynthConfig, SynthDataset};

/// Longest query kept at load time.
pub const QUERY_TOKEN_CAP: usize = 32;
/// Longest document kept at load time.
pub const DOC_TOKEN_CAP: usize = 300;

#[cfg(test)]
mod tests;
