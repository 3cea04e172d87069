use crate::autodiff::{finite_difference_grad, relative_error, Activation, Matrix, Tape};
use crate::error::{Error, Result};
use crate::heads::{head_forward_raw, Family, HeadParams, Layer};
use crate::maxsim::{maxsim_grad, TokenMatrix};
use crate::train::{record_tuple, tuple_loss, TrainingTuple};

use super::svd::{nuclear_norm, singular_spectrum};

/// Slacks of `‖W₁W₂‖_* ≤ ‖W₁‖_F‖W₂‖_F ≤ ½(‖W₁‖_F² + ‖W₂‖_F²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NuclearBound {
    pub nuclear: f64,
    pub frobenius_product: f64,
    pub am_gm: f64,
    pub slack_product: f64,
    pub slack_am_gm: f64,
}

impl NuclearBound {
    pub fn min_slack(&self) -> f64 {
        self.slack_product.min(self.slack_am_gm)
    }
}

pub fn nuclear_norm_bound_check(w1: &Matrix, w2: &Matrix) -> Result<NuclearBound> {
    let nuclear = nuclear_norm(&w1.matmul(w2)?)?;
    let (f1, f2) = (w1.frobenius_norm(), w2.frobenius_norm());
    let frobenius_product = f1 * f2;
    let am_gm = 0.5 * (f1 * f1 + f2 * f2);
    Ok(NuclearBound {
        nuclear,
        frobenius_product,
        am_gm,
        slack_product: frobenius_product - nuclear,
        slack_am_gm: am_gm - frobenius_product,
    })
}

/// The fixed metric `M = WWᵀ` of a globally linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricMatrix {
    pub m: Matrix,
    pub trace: f64,
    /// `eᵢᵀMeᵢ` per input direction.
    pub allocation: Vec<f64>,
    /// Eigenvalues of `M` (squared singular values of `W`, zero-padded to `d`), descending.
    pub eigenvalues: Vec<f64>,
}

impl MetricMatrix {
    /// `|Σᵢ eᵢᵀMeᵢ − tr(M)|` with the trace taken from the eigenvalues.
    pub fn trace_identity_residual(&self) -> f64 {
        let alloc: f64 = self.allocation.iter().sum();
        let eig: f64 = self.eigenvalues.iter().sum();
        (alloc - self.trace).abs().max((eig - self.trace).abs() / self.trace.abs().max(1.0))
    }

    /// Largest eigenvalue over the trace.
    pub fn top_share(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0) / self.trace
    }

    pub fn symmetry_residual(&self) -> f64 {
        self.m.sub(&self.m.transpose()).map_or(f64::NAN, |d| d.max_abs())
    }
}

pub fn metric_from_map(w: &Matrix) -> Result<MetricMatrix> {
    let m = w.matmul_nt(w)?;
    let trace = m.trace();
    let allocation = (0..m.rows())
        .map(|i| {
            let row = w.row(i);
            row.iter().map(|v| v * v).sum()
        })
        .collect();
    let mut eigenvalues: Vec<f64> = singular_spectrum(w)?.iter().map(|s| s * s).collect();
    eigenvalues.resize(w.rows(), 0.0);
    Ok(MetricMatrix {
        m,
        trace,
        allocation,
        eigenvalues,
    })
}

pub fn metric_matrix(head: &HeadParams) -> Result<MetricMatrix> {
    metric_from_map(&head.effective_linear_map()?)
}

/// Max entry of `(I+αW)(I+αW)ᵀ − (I + α(W+Wᵀ) + α²WWᵀ)`.
pub fn residual_metric_decomposition_check(w: &Matrix, alpha: f64) -> Result<f64> {
    if w.rows() != w.cols() {
        return Err(Error::contract(format!(
            "residual decomposition needs a square matrix, got {:?}",
            w.shape()
        )));
    }
    let eye = Matrix::identity(w.rows());
    let a = eye.add(&w.scale(alpha))?;
    let lhs = a.matmul_nt(&a)?;
    let rhs = eye
        .add(&w.add(&w.transpose())?.scale(alpha))?
        .add(&w.matmul_nt(w)?.scale(alpha * alpha))?;
    Ok(lhs.sub(&rhs)?.max_abs())
}

/// Fraction of document tokens whose MaxSim gradient row is exactly zero.
pub fn winner_sparsity(q: &TokenMatrix, d: &TokenMatrix) -> Result<f64> {
    let (_, dd) = maxsim_grad(q, d)?;
    let zero_rows = (0..dd.rows()).filter(|&r| dd.row(r).iter().all(|&v| v == 0.0)).count();
    Ok(zero_rows as f64 / d.token_count() as f64)
}

/// Analytic against central-difference Jacobian of a depth-2 FFN head.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianCheck {
    /// `d × k`, row `i` is `∂y/∂xᵢ`.
    pub analytic: Matrix,
    pub numeric: Matrix,
    /// `max |J − J_fd| / max(max |J|, 1e-12)`.
    pub max_rel_error: f64,
    /// For identity activations: whether `J` is the same at a second input.
    pub input_independent: Option<bool>,
}

fn dense(layer: &Layer) -> (&Matrix, Option<&Matrix>) {
    match layer {
        Layer::Dense { weight, bias } => (weight, bias.as_ref()),
        Layer::Gated { .. } => unreachable!("checked by caller"),
    }
}

fn analytic_jacobian(head: &HeadParams, x: &Matrix) -> Result<Matrix> {
    let (w1, b1) = dense(&head.layers[0]);
    let (w2, _) = dense(&head.layers[1]);
    let mut z = x.matmul(w1)?;
    if let Some(b) = b1 {
        z = z.add(b)?;
    }
    let act = head.config.activation;
    let slope = z.map(|v| act.derivative(v));
    // W₁·Diag(φ′(z)): scale column c of W₁ by φ′(z_c)
    let mut inner = Matrix::from_fn(w1.rows(), w1.cols(), |r, c| w1.get(r, c) * slope.get(0, c));
    if let Some(u) = &head.upcast {
        inner = u.add(&inner.scale(head.alphas[0].get(0, 0)))?;
    }
    inner.matmul(w2)
}

pub fn jacobian_check(head: &HeadParams, x: &[f64]) -> Result<JacobianCheck> {
    let c = &head.config;
    if c.family != Family::Ffn || c.depth != 2 {
        return Err(Error::contract(format!(
            "jacobian_check covers depth-2 FFN heads, got {} depth {}",
            c.family, c.depth
        )));
    }
    if x.len() != c.input_dim {
        return Err(Error::Shape {
            op: "jacobian_check",
            left: (1, x.len()),
            right: (c.input_dim, c.output_dim),
        });
    }
    let x = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let analytic = analytic_jacobian(head, &x)?;
    let mut numeric = Matrix::zeros(c.input_dim, c.output_dim);
    for out in 0..c.output_dim {
        let col = finite_difference_grad(
            |xp| head_forward_raw(head, xp).map(|y| y.get(0, out)).unwrap_or(f64::NAN),
            &x,
            1e-5,
        );
        for i in 0..c.input_dim {
            numeric.set(i, out, col.get(0, i));
        }
    }
    let max_rel_error = analytic.sub(&numeric)?.max_abs() / analytic.max_abs().max(1e-12);
    let input_independent = if c.activation == Activation::Identity {
        let other = x.map(|v| 0.5 - 2.0 * v);
        Some(analytic_jacobian(head, &other)? == analytic)
    } else {
        None
    };
    Ok(JacobianCheck {
        analytic,
        numeric,
        max_rel_error,
        input_independent,
    })
}

/// Max `|y_c − xᵀ(W_v[:,c] W_g[:,c]ᵀ)x|` over output coordinates of an identity-gated GLU.
pub fn glu_bilinear_check(head: &HeadParams, x: &[f64]) -> Result<f64> {
    let c = &head.config;
    if c.family != Family::Glu || c.depth != 1 || c.bias || c.gate != Activation::Identity {
        return Err(Error::contract(
            "glu_bilinear_check needs a depth-1, bias-free GLU head with identity gate",
        ));
    }
    if x.len() != c.input_dim {
        return Err(Error::Shape {
            op: "glu_bilinear_check",
            left: (1, x.len()),
            right: (c.input_dim, c.output_dim),
        });
    }
    let Layer::Gated { value, gate, .. } = &head.layers[0] else {
        unreachable!("family checked above")
    };
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let y = head_forward_raw(head, &xm)?;
    let mut worst: f64 = 0.0;
    for out in 0..c.output_dim {
        let form = Matrix::from_fn(c.input_dim, c.input_dim, |a, b| value.get(a, out) * gate.get(b, out));
        let quad = xm.matmul(&form)?.matmul_nt(&xm)?.get(0, 0);
        worst = worst.max((y.get(0, out) - quad).abs());
    }
    Ok(worst)
}

/// Finite-difference step and error floor of the gradient audit.
pub const AUDIT_STEP: f64 = 1e-5;
pub const AUDIT_FLOOR: f64 = 1e-6;
/// A document token counts as tied when its similarity is this close to a winner's.
pub const TIE_MARGIN: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamAudit {
    pub name: String,
    pub rel_error: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientAudit {
    pub loss: f64,
    pub params: Vec<ParamAudit>,
    /// Non-winning, untied document tokens whose embedding gradient was checked.
    pub checked_losers: usize,
    /// Of those, rows that were not exactly zero.
    pub loser_violations: usize,
    /// Document tokens with a nonzero embedding gradient, per candidate.
    pub nonzero_doc_rows: Vec<usize>,
}

impl GradientAudit {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

/// Autodiff vs central differences on every head tensor for one tuple, plus
/// the winner-only check on document-token embedding gradients. Read-only.
pub fn head_gradient_audit(head: &HeadParams, tuple: &TrainingTuple) -> Result<GradientAudit> {
    let mut tape = Tape::new();
    let bound = head.bind(&mut tape);
    let graph = record_tuple(&mut tape, &bound, tuple)?;
    let loss = tape.value(graph.loss).get(0, 0);
    let grads = tape.backward(graph.loss)?;
    if !loss.is_finite() {
        return Err(Error::contract("gradient audit: non-finite loss"));
    }

    // winners among the projected, normalized tokens
    let token_grads = grads.get(graph.tokens);
    let y = tape.value(graph.projected);
    let m = tuple.query.rows();
    let q = y.slice_rows(0, m);
    let mut checked_losers = 0;
    let mut loser_violations = 0;
    let mut nonzero_doc_rows = Vec::with_capacity(tuple.docs.len());
    for (doc, &start) in tuple.docs.iter().zip(&graph.doc_offsets) {
        let d = y.slice_rows(start, start + doc.rows());
        let sims = q.matmul_nt(&d)?;
        let best: Vec<f64> = (0..m)
            .map(|i| sims.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut nonzero = 0;
        for j in 0..doc.rows() {
            let row = token_grads.row(start + j);
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::contract(format!("gradient audit: NaN in embedding gradient row {}", start + j)));
            }
            let is_zero = row.iter().all(|&v| v == 0.0);
            if !is_zero {
                nonzero += 1;
            }
            let clear_loser = (0..m).all(|i| sims.get(i, j) < best[i] - TIE_MARGIN);
            if clear_loser {
                checked_losers += 1;
                if !is_zero {
                    loser_violations += 1;
                }
            }
        }
        nonzero_doc_rows.push(nonzero);
    }

    let names: Vec<String> = head.tensors().into_iter().map(|t| t.name).collect();
    let analytic = bound.gradients(&grads);
    let mut probe = head.clone();
    let mut params = Vec::with_capacity(names.len());
    for (i, (name, g)) in names.into_iter().zip(&analytic).enumerate() {
        if !g.is_finite() {
            return Err(Error::contract(format!("gradient audit: NaN in gradient of {name}")));
        }
        let base = head.tensors()[i].value.clone();
        let mut fd = Matrix::zeros(base.rows(), base.cols());
        for j in 0..base.len() {
            let orig = base.values()[j];
            let mut eval = |v: f64| -> Result<f64> {
                probe.tensors_mut()[i].1.values_mut()[j] = v;
                tuple_loss(&probe, tuple)
            };
            let plus = eval(orig + AUDIT_STEP)?;
            let minus = eval(orig - AUDIT_STEP)?;
            probe.tensors_mut()[i].1.values_mut()[j] = orig;
            fd.values_mut()[j] = (plus - minus) / (2.0 * AUDIT_STEP);
        }
        if !fd.is_finite() {
            return Err(Error::contract(format!("gradient audit: NaN in finite differences of {name}")));
        }
        params.push(ParamAudit {
            name,
            rel_error: relative_error(g, &fd, AUDIT_FLOOR),
            grad_norm: g.frobenius_norm(),
        });
    }
    Ok(GradientAudit {
        loss,
        params,
        checked_losers,
        loser_violations,
        nonzero_doc_rows,
    })
}
