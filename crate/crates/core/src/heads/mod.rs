//! Projection heads: the linear baseline, stacked FFN and GLU blocks,
//! and residual variants, all followed by row L2 normalization.

mod config;
mod io;
mod params;

pub use config::{Family, HeadConfig};
pub use io::{deserialize_head, read_head, serialize_head, write_head, HEAD_FORMAT, HEAD_FORMAT_VERSION};
pub use params::{build_head, head_forward, head_forward_raw, BoundHead, HeadParams, Layer, ParamKind, ParamRef};

/// Number of learnable scalars `config` implies.
pub fn parameter_count(config: &HeadConfig) -> usize {
    config.parameter_count()
}
