use std::collections::BTreeMap;

use super::config::{Family, HeadConfig};
use crate::autodiff::{Activation, Gradients, Matrix, Tape, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Subject to weight decay.
    Weight,
    Bias,
    Alpha,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        weight: Matrix,
        bias: Option<Matrix>,
    },
    Gated {
        value: Matrix,
        gate: Matrix,
        value_bias: Option<Matrix>,
        gate_bias: Option<Matrix>,
    },
}

/// Learned parameters of a projection head.
///
/// Tensor declaration order (used by serialization and the optimizer):
/// `upcast`, then per layer `weight`/`bias` (FFN) or
/// `value`/`gate`/`value_bias`/`gate_bias` (GLU), then one `alpha` per
/// residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub seed: u64,
    pub upcast: Option<Matrix>,
    pub layers: Vec<Layer>,
    /// `1 × 1` residual multipliers.
    pub alphas: Vec<Matrix>,
    /// Free-form provenance carried into the head file header.
    pub metadata: BTreeMap<String, String>,
}

/// Borrowed view of one parameter tensor.
#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub value: &'a Matrix,
}

fn xavier(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.uniform_range(-bound, bound))
}

/// Deterministic initialization from `seed`.
///
/// Weights are drawn fan-balanced uniform `±√(6/(fan_in + fan_out))` in
/// declaration order; the upcast starts as the rectangular identity; biases
/// start at zero and every α at `alpha_init`.
pub fn build_head(config: &HeadConfig, seed: u64) -> Result<HeadParams> {
    config.validate()?;
    let mut rng = SeededRng::new(seed);
    let upcast = config
        .has_upcast()
        .then(|| Matrix::eye(config.input_dim, config.intermediate_dim()));
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(i, o)| {
            let bias = || config.bias.then(|| Matrix::zeros(1, o));
            match config.family {
                Family::Ffn => Layer::Dense {
                    weight: xavier(&mut rng, i, o),
                    bias: bias(),
                },
                Family::Glu => {
                    let value = xavier(&mut rng, i, o);
                    let gate = xavier(&mut rng, i, o);
                    Layer::Gated {
                        value,
                        gate,
                        value_bias: bias(),
                        gate_bias: bias(),
                    }
                }
            }
        })
        .collect();
    let alphas = (0..config.residual_blocks())
        .map(|_| Matrix::scalar(config.alpha_init))
        .collect();
    Ok(HeadParams {
        config: config.clone(),
        seed,
        upcast,
        layers,
        alphas,
        metadata: BTreeMap::new(),
    })
}

impl HeadParams {
    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        let mut push = |name: String, kind, value| out.push(ParamRef { name, kind, value });
        if let Some(u) = &self.upcast {
            push("upcast".into(), ParamKind::Weight, u);
        }
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { weight, bias } => {
                    push(format!("layers.{l}.weight"), ParamKind::Weight, weight);
                    if let Some(b) = bias {
                        push(format!("layers.{l}.bias"), ParamKind::Bias, b);
                    }
                }
                Layer::Gated {
                    value,
                    gate,
                    value_bias,
                    gate_bias,
                } => {
                    push(format!("layers.{l}.value"), ParamKind::Weight, value);
                    push(format!("layers.{l}.gate"), ParamKind::Weight, gate);
                    if let Some(b) = value_bias {
                        push(format!("layers.{l}.value_bias"), ParamKind::Bias, b);
                    }
                    if let Some(b) = gate_bias {
                        push(format!("layers.{l}.gate_bias"), ParamKind::Bias, b);
                    }
                }
            }
        }
        for (i, a) in self.alphas.iter().enumerate() {
            push(format!("alpha.{i}"), ParamKind::Alpha, a);
        }
        out
    }

    /// Mutable tensors in declaration order.
    pub fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut Matrix)> {
        let mut out: Vec<(ParamKind, &mut Matrix)> = Vec::new();
        if let Some(u) = &mut self.upcast {
            out.push((ParamKind::Weight, u));
        }
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    out.push((ParamKind::Weight, weight));
                    if let Some(b) = bias {
                        out.push((ParamKind::Bias, b));
                    }
                }
                Layer::Gated {
                    value,
                    gate,
                    value_bias,
                    gate_bias,
                } => {
                    out.push((ParamKind::Weight, value));
                    out.push((ParamKind::Weight, gate));
                    if let Some(b) = value_bias {
                        out.push((ParamKind::Bias, b));
                    }
                    if let Some(b) = gate_bias {
                        out.push((ParamKind::Bias, b));
                    }
                }
            }
        }
        for a in &mut self.alphas {
            out.push((ParamKind::Alpha, a));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.value.len()).sum()
    }

    /// Records every tensor as a tape leaf, in declaration order.
    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        let upcast = self.upcast.as_ref().map(|u| tape.leaf(u.clone()));
        let mut leaf = |m: &Matrix| tape.leaf(m.clone());
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Dense { weight, bias } => BoundLayer::Dense {
                    weight: leaf(weight),
                    bias: bias.as_ref().map(&mut leaf),
                },
                Layer::Gated {
                    value,
                    gate,
                    value_bias,
                    gate_bias,
                } => {
                    let value = leaf(value);
                    let gate = leaf(gate);
                    BoundLayer::Gated {
                        value,
                        gate,
                        value_bias: value_bias.as_ref().map(&mut leaf),
                        gate_bias: gate_bias.as_ref().map(&mut leaf),
                    }
                }
            })
            .collect();
        let alphas = self.alphas.iter().map(&mut leaf).collect();
        BoundHead {
            activation: self.config.activation,
            gate: self.config.gate,
            upcast,
            layers,
            alphas,
        }
    }

    /// `W₁W₂⋯W_L` of a globally linear head (FFN, identity activation, no residual, no bias).
    pub fn effective_linear_map(&self) -> Result<Matrix> {
        let c = &self.config;
        if c.family != Family::Ffn {
            return Err(Error::contract("effective_linear_map: GLU heads are not linear (gating)"));
        }
        if c.depth > 1 && c.activation != Activation::Identity {
            return Err(Error::contract(format!(
                "effective_linear_map: non-identity activation '{}'",
                c.activation
            )));
        }
        if c.has_upcast() {
            return Err(Error::contract("effective_linear_map: residual connection"));
        }
        if c.bias {
            return Err(Error::contract("effective_linear_map: bias terms make the head affine"));
        }
        let mut weights = self.layers.iter().map(|l| match l {
            Layer::Dense { weight, .. } => weight,
            Layer::Gated { .. } => unreachable!("family checked above"),
        });
        let first = weights.next().expect("validated heads have a layer").clone();
        weights.try_fold(first, |acc, w| acc.matmul(w))
    }

    /// Weight matrices of an FFN head in layer order.
    pub fn dense_weights(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense { weight, .. } => Some(weight),
                Layer::Gated { .. } => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
enum BoundLayer {
    Dense {
        weight: Var,
        bias: Option<Var>,
    },
    Gated {
        value: Var,
        gate: Var,
        value_bias: Option<Var>,
        gate_bias: Option<Var>,
    },
}

/// A head whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundHead {
    activation: Activation,
    gate: Activation,
    upcast: Option<Var>,
    layers: Vec<BoundLayer>,
    alphas: Vec<Var>,
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

impl BoundHead {
    /// Head output before the final row normalization.
    pub fn project(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = match *layer {
                BoundLayer::Dense { weight, bias } => affine(tape, h, weight, bias)?,
                BoundLayer::Gated {
                    value,
                    gate,
                    value_bias,
                    gate_bias,
                } => {
                    let v = affine(tape, h, value, value_bias)?;
                    let g = affine(tape, h, gate, gate_bias)?;
                    let g = self.apply(tape, g, self.gate);
                    tape.mul(v, g)?
                }
            };
            if l < last {
                y = self.apply(tape, y, self.activation);
                if let Some(upcast) = self.upcast {
                    let skip = if l == 0 { tape.matmul(h, upcast)? } else { h };
                    let scaled = tape.scale_by(y, self.alphas[l])?;
                    y = tape.add(skip, scaled)?;
                }
            }
            h = y;
        }
        Ok(h)
    }

    /// Projected and row-normalized tokens.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.project(tape, x)?;
        tape.row_l2_normalize(y, NORM_EPS)
    }

    fn apply(&self, tape: &mut Tape, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            x
        } else {
            tape.activation(x, kind)
        }
    }

    /// Leaves in declaration order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.upcast.into_iter().collect();
        for layer in &self.layers {
            match *layer {
                BoundLayer::Dense { weight, bias } => {
                    out.push(weight);
                    out.extend(bias);
                }
                BoundLayer::Gated {
                    value,
                    gate,
                    value_bias,
                    gate_bias,
                } => {
                    out.extend([value, gate]);
                    out.extend(value_bias);
                    out.extend(gate_bias);
                }
            }
        }
        out.extend(&self.alphas);
        out
    }

    /// Gradients for every parameter, in declaration order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Matrix> {
        self.vars().into_iter().map(|v| grads.get(v)).collect()
    }
}

fn check_input(params: &HeadParams, x: &Matrix) -> Result<()> {
    if x.cols() != params.config.input_dim {
        return Err(Error::Shape {
            op: "head_forward",
            left: x.shape(),
            right: (params.config.input_dim, params.config.output_dim),
        });
    }
    Ok(())
}

/// Projects raw tokens and L2-normalizes each output row.
pub fn head_forward(params: &HeadParams, x: &Matrix) -> Result<Matrix> {
    check_input(params, x)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = bound.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

/// Head output before normalization.
pub fn head_forward_raw(params: &HeadParams, x: &Matrix) -> Result<Matrix> {
    check_input(params, x)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = bound.project(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}
