use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Activation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Ffn,
    Glu,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Ffn => "ffn",
            Family::Glu => "glu",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ffn" => Ok(Family::Ffn),
            "glu" => Ok(Family::Glu),
            other => Err(Error::config(format!("unknown head family '{other}'"))),
        }
    }
}

/// Declarative description of a projection head.
///
/// Layer `l` of a depth-`L` head maps `d → m` when `l = 0`, `m → m` in the
/// middle, and `m → k` when `l = L − 1`, with `m = round(ρ·d)`; a depth-1
/// head maps `d → k` directly. `activation` applies to the output of every
/// non-final layer, `gate` is the GLU gating nonlinearity.
///
/// With `residual` set and depth ≥ 2, every non-final layer becomes a skip
/// block `skip(h) + α·layer(h)`, where the first block's skip path is a
/// learnable, identity-initialized `d × m` upcast and later blocks skip
/// with `h` itself. The final down-projection never carries a residual, so
/// `residual` has no effect at depth 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub depth: usize,
    pub family: Family,
    pub activation: Activation,
    pub gate: Activation,
    pub rho: f64,
    pub residual: bool,
    pub bias: bool,
    pub alpha_init: f64,
}

impl HeadConfig {
    /// The single-matrix baseline `h(x) = xW`.
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            depth: 1,
            family: Family::Ffn,
            activation: Activation::Identity,
            gate: Activation::Sigmoid,
            rho: 1.0,
            residual: false,
            bias: false,
            alpha_init: 1.0,
        }
    }

    /// Stacked FFN head; biases on by default once there is more than one layer.
    pub fn ffn(input_dim: usize, output_dim: usize, depth: usize, rho: f64) -> Self {
        Self {
            depth,
            rho,
            bias: depth > 1,
            ..Self::linear(input_dim, output_dim)
        }
    }

    pub fn glu(input_dim: usize, output_dim: usize, depth: usize, rho: f64, gate: Activation) -> Self {
        Self {
            family: Family::Glu,
            gate,
            ..Self::ffn(input_dim, output_dim, depth, rho)
        }
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_alpha_init(mut self, alpha: f64) -> Self {
        self.alpha_init = alpha;
        self
    }

    pub fn intermediate_dim(&self) -> usize {
        (self.rho * self.input_dim as f64).round() as usize
    }

    pub fn has_upcast(&self) -> bool {
        self.residual && self.depth >= 2
    }

    pub fn residual_blocks(&self) -> usize {
        if self.has_upcast() {
            self.depth - 1
        } else {
            0
        }
    }

    /// `(in, out)` of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let (d, k, m) = (self.input_dim, self.output_dim, self.intermediate_dim());
        (0..self.depth)
            .map(|l| {
                let fan_in = if l == 0 { d } else { m };
                let fan_out = if l + 1 == self.depth { k } else { m };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("head depth must be at least 1"));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("head input and output dimensions must be positive"));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::config(format!("projection scale rho must be positive, got {}", self.rho)));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::config("alpha_init must be finite"));
        }
        let m = self.intermediate_dim();
        if self.depth >= 2 {
            if m == 0 {
                return Err(Error::config(format!(
                    "intermediate dimension round({} * {}) is zero",
                    self.rho, self.input_dim
                )));
            }
            if self.output_dim > m {
                return Err(Error::config(format!(
                    "output dimension {} exceeds intermediate dimension {m}",
                    self.output_dim
                )));
            }
        }
        Ok(())
    }

    /// Exact count of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let streams = match self.family {
            Family::Ffn => 1,
            Family::Glu => 2,
        };
        let layers: usize = self
            .layer_dims()
            .iter()
            .map(|&(i, o)| streams * (i * o + if self.bias { o } else { 0 }))
            .sum();
        let upcast = if self.has_upcast() {
            self.input_dim * self.intermediate_dim()
        } else {
            0
        };
        layers + upcast + self.residual_blocks()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(HeadConfig::linear(8, 4).parameter_count(), 32);
        assert_eq!(HeadConfig::ffn(8, 4, 2, 2.0).with_bias(false).parameter_count(), 192);
        assert_eq!(
            HeadConfig::glu(8, 4, 1, 1.0, Activation::Sigmoid).with_bias(false).parameter_count(),
            64
        );
        // upcast 8×16 plus one α on top of the 192
        let res = HeadConfig::ffn(8, 4, 2, 2.0).with_bias(false).with_residual(true);
        assert_eq!(res.parameter_count(), 192 + 128 + 1);
    }

    #[test]
    fn validation() {
        assert!(HeadConfig::ffn(8, 4, 0, 2.0).validate().is_err());
        assert!(HeadConfig::ffn(8, 20, 2, 2.0).validate().is_err());
        assert!(HeadConfig::ffn(8, 4, 2, 0.0).validate().is_err());
        assert!(HeadConfig::ffn(8, 4, 3, 0.5).validate().is_ok());
        // depth 1 may widen
        assert!(HeadConfig::linear(2, 4).validate().is_ok());
    }

    #[test]
    fn hash_tracks_config() {
        let a = HeadConfig::ffn(8, 4, 2, 2.0);
        assert_eq!(a.config_hash(), a.clone().config_hash());
        assert_ne!(a.config_hash(), a.with_residual(true).config_hash());
    }
}
