use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};

use super::checks::*;
use super::svd::{parseval_residual, singular_spectrum};
use crate::autodiff::Matrix;
use crate::error::Result;
use crate::heads::{head_forward, HeadParams, Layer};
use crate::maxsim::{winners, TokenMatrix};
use crate::rng::SeededRng;
use crate::train::TrainingTuple;

pub const TOL_IDENTITY: f64 = 1e-10;
pub const TOL_NUCLEAR_SLACK: f64 = -1e-8;
pub const TOL_JACOBIAN: f64 = 1e-5;
pub const TOL_AUDIT: f64 = 1e-4;

/// One named check with its inputs, measurements and verdict.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// The claim under test, in words.
    pub claim: String,
    pub inputs: Value,
    pub measured: Value,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct NotApplicable {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsReport {
    pub head: Value,
    pub tolerances: BTreeMap<String, f64>,
    pub checks: Vec<CheckResult>,
    pub not_applicable: Vec<NotApplicable>,
}

impl DiagnosticsReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

struct Builder {
    checks: Vec<CheckResult>,
    not_applicable: Vec<NotApplicable>,
}

impl Builder {
    fn check(&mut self, name: impl Into<String>, claim: &str, inputs: Value, measured: Value, tolerance: f64, pass: bool) {
        self.checks.push(CheckResult {
            name: name.into(),
            claim: claim.to_string(),
            inputs,
            measured,
            tolerance,
            pass,
        });
    }

    fn skip(&mut self, name: &str, reason: impl Into<String>) {
        self.not_applicable.push(NotApplicable {
            name: name.to_string(),
            reason: reason.into(),
        });
    }
}

/// Weight matrices that chain by multiplication, in layer order.
fn chain(head: &HeadParams) -> Vec<(String, &Matrix)> {
    head.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| match layer {
            Layer::Dense { weight, .. } => (format!("layers.{l}.weight"), weight),
            Layer::Gated { value, .. } => (format!("layers.{l}.value"), value),
        })
        .collect()
}

fn random_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Runs every applicable check on `head` (and on `tuple` when given).
pub fn run_diagnostics(head: &HeadParams, tuple: Option<&TrainingTuple>, seed: u64) -> Result<DiagnosticsReport> {
    let mut b = Builder {
        checks: Vec::new(),
        not_applicable: Vec::new(),
    };
    let mut rng = SeededRng::new(seed);
    let cfg = &head.config;
    let d = cfg.input_dim;

    for t in head.tensors() {
        if t.value.rows() < 2 && t.value.cols() < 2 {
            continue;
        }
        let sigma = singular_spectrum(t.value)?;
        let residual = parseval_residual(t.value, &sigma);
        let total: f64 = sigma.iter().sum();
        b.check(
            format!("singular_spectrum:{}", t.name),
            "sum of squared singular values equals the squared Frobenius norm; spectrum concentration is reported",
            json!({"tensor": t.name, "shape": [t.value.rows(), t.value.cols()]}),
            json!({
                "singular_values": sigma,
                "parseval_residual": residual,
                "concentration": sigma[0] / total,
            }),
            TOL_IDENTITY,
            residual <= TOL_IDENTITY,
        );
    }

    let weights = chain(head);
    if weights.len() < 2 {
        b.skip("nuclear_norm_chain", "single-layer head has no factorization");
    }
    for pair in weights.windows(2) {
        let r = nuclear_norm_bound_check(pair[0].1, pair[1].1)?;
        b.check(
            format!("nuclear_norm_chain:{}*{}", pair[0].0, pair[1].0),
            "a factorized map's nuclear norm is bounded by the Frobenius product, itself bounded by the mean of squared Frobenius norms",
            json!({"left": pair[0].0, "right": pair[1].0}),
            json!({
                "nuclear": r.nuclear,
                "frobenius_product": r.frobenius_product,
                "am_gm": r.am_gm,
                "slack_product": r.slack_product,
                "slack_am_gm": r.slack_am_gm,
            }),
            TOL_NUCLEAR_SLACK,
            r.min_slack() >= TOL_NUCLEAR_SLACK,
        );
    }

    match metric_matrix(head) {
        Ok(mm) => {
            let residual = mm.trace_identity_residual();
            let sym = mm.symmetry_residual();
            let min_eig = mm.eigenvalues.last().copied().unwrap_or(0.0);
            b.check(
                "metric_trace_identity",
                "a linear head measures cosine similarity under the fixed metric M = W W^T whose diagonal allocation sums to tr(M)",
                json!({"dim": d}),
                json!({
                    "trace": mm.trace,
                    "allocation": mm.allocation,
                    "eigenvalues": mm.eigenvalues,
                    "top_share": mm.top_share(),
                    "trace_residual": residual,
                    "symmetry_residual": sym,
                }),
                TOL_IDENTITY,
                residual <= TOL_IDENTITY && sym <= TOL_IDENTITY && min_eig >= -TOL_IDENTITY,
            );
        }
        Err(e) => b.skip("metric_trace_identity", e.to_string()),
    }

    let (w, alpha, source) = match (&head.layers[0], head.alphas.first()) {
        (Layer::Dense { weight, .. }, Some(a)) if weight.rows() == weight.cols() => {
            (weight.clone(), a.get(0, 0), "head first layer and alpha")
        }
        _ => (
            Matrix::from_fn(d, d, |_, _| rng.normal()),
            0.7,
            "random square matrix",
        ),
    };
    let residual = residual_metric_decomposition_check(&w, alpha)?;
    b.check(
        "residual_metric_decomposition",
        "(I + aW)(I + aW)^T expands to I + a(W + W^T) + a^2 W W^T",
        json!({"source": source, "dim": w.rows(), "alpha": alpha}),
        json!({"residual": residual}),
        TOL_IDENTITY,
        residual <= TOL_IDENTITY,
    );

    let x = random_vec(&mut rng, d);
    match glu_bilinear_check(head, &x) {
        Ok(r) => b.check(
            "glu_bilinear",
            "an identity-gated GLU layer is a bilinear form per output coordinate",
            json!({"x": x}),
            json!({"residual": r}),
            TOL_IDENTITY,
            r <= TOL_IDENTITY,
        ),
        Err(e) => b.skip("glu_bilinear", e.to_string()),
    }

    match jacobian_check(head, &x) {
        Ok(j) => b.check(
            "jacobian",
            "a depth-2 FFN head has the input-dependent Jacobian W1 Diag(phi'(x W1)) W2, constant when phi is the identity",
            json!({"x": x, "activation": cfg.activation.name(), "residual": cfg.residual}),
            json!({"max_rel_error": j.max_rel_error, "input_independent": j.input_independent}),
            TOL_JACOBIAN,
            j.max_rel_error <= TOL_JACOBIAN && j.input_independent != Some(false),
        ),
        Err(e) => b.skip("jacobian", e.to_string()),
    }

    match tuple {
        Some(t) => {
            let q = TokenMatrix::from_head_output(head_forward(head, &t.query)?);
            let mut measured = Vec::new();
            let mut expected = Vec::new();
            for doc in &t.docs {
                let dm = TokenMatrix::from_head_output(head_forward(head, doc)?);
                measured.push(winner_sparsity(&q, &dm)?);
                let distinct = winners(&q, &dm)?.distinct();
                let n = dm.token_count();
                expected.push((n - distinct) as f64 / n as f64);
            }
            b.check(
                "winner_sparsity",
                "only winning document tokens receive MaxSim gradient",
                json!({"query_tokens": t.query.rows(), "candidates": t.docs.len()}),
                json!({"sparsity": measured, "losers_over_n": expected}),
                0.0,
                measured == expected,
            );

            let audit = head_gradient_audit(head, t)?;
            let per_param: BTreeMap<&str, f64> =
                audit.params.iter().map(|p| (p.name.as_str(), p.rel_error)).collect();
            b.check(
                "head_gradient_audit",
                "parameter gradients through head, MaxSim and KL match finite differences; non-winning document tokens get exactly zero gradient",
                json!({"step": AUDIT_STEP, "floor": AUDIT_FLOOR, "loss": audit.loss}),
                json!({
                    "max_rel_error": audit.max_rel_error(),
                    "per_tensor": per_param,
                    "checked_losers": audit.checked_losers,
                    "loser_violations": audit.loser_violations,
                    "nonzero_doc_rows": audit.nonzero_doc_rows,
                }),
                TOL_AUDIT,
                audit.max_rel_error() <= TOL_AUDIT && audit.loser_violations == 0,
            );
        }
        None => {
            b.skip("winner_sparsity", "no tuple supplied");
            b.skip("head_gradient_audit", "no tuple supplied");
        }
    }

    let tolerances = BTreeMap::from([
        ("identity".to_string(), TOL_IDENTITY),
        ("nuclear_slack".to_string(), TOL_NUCLEAR_SLACK),
        ("jacobian".to_string(), TOL_JACOBIAN),
        ("gradient_audit".to_string(), TOL_AUDIT),
    ]);
    Ok(DiagnosticsReport {
        head: json!({"config": cfg, "seed": head.seed, "metadata": head.metadata}),
        tolerances,
        checks: b.checks,
        not_applicable: b.not_applicable,
    })
}
