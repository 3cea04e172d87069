use super::*;
use crate::autodiff::{Activation, Matrix};
use crate::heads::{build_head, HeadConfig, Layer};
use crate::maxsim::TokenMatrix;
use crate::rng::SeededRng;
use crate::train::TrainingTuple;

fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn spectrum_reference_cases() {
    let diag = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
    assert!(close(&singular_spectrum(&diag).unwrap(), &[3.0, 1.0], 1e-14));
    assert!(close(&singular_spectrum(&Matrix::identity(5)).unwrap(), &[1.0; 5], 1e-14));

    let u = [1.0, -2.0, 0.5];
    let v = [3.0, 0.0, 4.0, 1.0];
    let outer = Matrix::from_fn(3, 4, |i, j| u[i] * v[j]);
    let s = singular_spectrum(&outer).unwrap();
    let expected = (1.0f64 + 4.0 + 0.25).sqrt() * (9.0f64 + 16.0 + 1.0).sqrt();
    assert!((s[0] - expected).abs() < 1e-12);
    assert!(s[1..].iter().all(|x| x.abs() < 1e-12));

    // numpy.linalg.svd of the same matrix
    let a = Matrix::from_rows(&[
        vec![1.5, -2.0, 0.25, 3.0],
        vec![0.5, 4.0, -1.0, 0.0],
        vec![2.0, 1.0, 1.0, -0.75],
    ])
    .unwrap();
    let reference = [4.95958695702216, 3.1005244584167304, 2.216809711837107];
    assert!(close(&singular_spectrum(&a).unwrap(), &reference, 1e-12));
    assert!(close(&singular_spectrum(&a.transpose()).unwrap(), &reference, 1e-12));
    assert!((nuclear_norm(&a).unwrap() - 10.276921127275997).abs() < 1e-12);
    assert!(singular_spectrum(&Matrix::zeros(0, 0)).is_err());
}

#[test]
fn parseval_on_random_matrices() {
    let mut rng = SeededRng::new(1);
    for (r, c) in [(8, 16), (16, 4), (32, 32), (1, 7), (50, 3)] {
        let w = random(r, c, &mut rng);
        let s = singular_spectrum(&w).unwrap();
        assert_eq!(s.len(), r.min(c));
        assert!(s.windows(2).all(|p| p[0] >= p[1]));
        assert!(parseval_residual(&w, &s) < 1e-12, "{r}x{c}");
    }
}

#[test]
fn nuclear_chain_cases() {
    let eye = Matrix::identity(4);
    let r = nuclear_norm_bound_check(&eye, &eye).unwrap();
    assert!((r.nuclear - 4.0).abs() < 1e-12 && r.slack_product.abs() < 1e-12 && r.slack_am_gm.abs() < 1e-12);

    // orthogonal columns with W₂ = W₁ᵀ: equal Frobenius norms, so AM-GM is tight
    let w1 = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
    let r = nuclear_norm_bound_check(&w1, &w1.transpose()).unwrap();
    assert!(r.slack_am_gm.abs() < 1e-12);

    let mut rng = SeededRng::new(2);
    let r = nuclear_norm_bound_check(&random(8, 16, &mut rng), &random(16, 4, &mut rng)).unwrap();
    assert!(r.slack_product > 0.0 && r.slack_am_gm > 0.0);
    assert!(nuclear_norm_bound_check(&random(3, 4, &mut rng), &random(3, 4, &mut rng)).is_err());
}

fn linear_head_with(w: Matrix) -> crate::heads::HeadParams {
    let mut p = build_head(&HeadConfig::linear(w.rows(), w.cols()), 0).unwrap();
    p.layers[0] = Layer::Dense { weight: w, bias: None };
    p
}

#[test]
fn metric_matrix_cases() {
    let m = metric_matrix(&linear_head_with(Matrix::identity(3))).unwrap();
    assert_eq!(m.m, Matrix::identity(3));
    assert_eq!(m.trace, 3.0);
    assert_eq!(m.allocation, vec![1.0; 3]);

    let m = metric_matrix(&linear_head_with(Matrix::identity(3).scale(2.0))).unwrap();
    assert_eq!(m.m, Matrix::identity(3).scale(4.0));
    assert_eq!(m.trace, 12.0);

    let mut rng = SeededRng::new(3);
    let m = metric_matrix(&linear_head_with(random(6, 3, &mut rng))).unwrap();
    assert!(m.trace_identity_residual() < 1e-10);
    assert_eq!(m.eigenvalues.len(), 6);
    assert!(m.eigenvalues[3..].iter().all(|&e| e == 0.0));
    assert!(m.symmetry_residual() == 0.0);

    let glu = build_head(&HeadConfig::glu(4, 2, 1, 1.0, Activation::Identity), 0).unwrap();
    assert!(metric_matrix(&glu).is_err());
}

#[test]
fn residual_decomposition_cases() {
    let mut rng = SeededRng::new(4);
    let w = random(5, 5, &mut rng);
    assert_eq!(residual_metric_decomposition_check(&w, 0.0).unwrap(), 0.0);
    let sym = w.add(&w.transpose()).unwrap();
    assert!(residual_metric_decomposition_check(&sym, 1.0).unwrap() < 1e-12);
    assert!(residual_metric_decomposition_check(&w, 0.7).unwrap() < 1e-12);
    assert!(residual_metric_decomposition_check(&random(2, 3, &mut rng), 1.0).is_err());
}

#[test]
fn winner_sparsity_cases() {
    let mut rng = SeededRng::new(5);
    let tm = |m: Matrix| TokenMatrix::normalized(&m).unwrap();
    let q = tm(random(1, 4, &mut rng));
    let d = tm(random(10, 4, &mut rng));
    assert!((winner_sparsity(&q, &d).unwrap() - 0.9).abs() < 1e-15);

    // every query token picks the same document token
    let d = tm(random(6, 4, &mut rng));
    let row = d.as_matrix().slice_rows(2, 3);
    let same = tm(Matrix::vstack(&[&row, &row, &row]).unwrap());
    assert!((winner_sparsity(&same, &d).unwrap() - 5.0 / 6.0).abs() < 1e-15);

    // m ≥ n with every document token winning
    let q = tm(Matrix::vstack(&[&d.as_matrix().clone(), &d.as_matrix().slice_rows(0, 2)]).unwrap());
    assert_eq!(winner_sparsity(&q, &d).unwrap(), 0.0);
}

#[test]
fn jacobian_cases() {
    let mut rng = SeededRng::new(6);
    let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();

    let lin = build_head(&HeadConfig::ffn(6, 3, 2, 2.0), 1).unwrap();
    let j = jacobian_check(&lin, &x).unwrap();
    assert_eq!(j.input_independent, Some(true));
    let w = lin.dense_weights();
    assert!(j.analytic.sub(&w[0].matmul(w[1]).unwrap()).unwrap().max_abs() == 0.0);

    let gelu = build_head(&HeadConfig::ffn(6, 3, 2, 2.0).with_activation(Activation::Gelu), 2).unwrap();
    let j = jacobian_check(&gelu, &x).unwrap();
    assert!(j.max_rel_error <= 1e-5, "{}", j.max_rel_error);
    assert_eq!(j.input_independent, None);

    let res = build_head(&HeadConfig::ffn(6, 3, 2, 2.0).with_residual(true).with_activation(Activation::Silu), 3).unwrap();
    assert!(jacobian_check(&res, &x).unwrap().max_rel_error <= 1e-5);

    // ReLU with every pre-activation positive: plain product of weights
    let mut relu = build_head(&HeadConfig::ffn(2, 2, 2, 1.0).with_activation(Activation::Relu).with_bias(false), 0).unwrap();
    relu.layers[0] = Layer::Dense { weight: Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, 1.0]]).unwrap(), bias: None };
    let j = jacobian_check(&relu, &[1.0, 1.0]).unwrap();
    let w = relu.dense_weights();
    assert!(j.analytic.sub(&w[0].matmul(w[1]).unwrap()).unwrap().max_abs() == 0.0);

    assert!(jacobian_check(&build_head(&HeadConfig::ffn(6, 3, 3, 2.0), 0).unwrap(), &x).is_err());
    assert!(jacobian_check(&lin, &x[..5]).is_err());
}

#[test]
fn glu_bilinear_cases() {
    let cfg = HeadConfig::glu(4, 3, 1, 1.0, Activation::Identity).with_bias(false);
    let head = build_head(&cfg, 7).unwrap();
    let mut rng = SeededRng::new(8);
    let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
    assert!(glu_bilinear_check(&head, &x).unwrap() < 1e-12);

    let Layer::Gated { value, gate, .. } = &head.layers[0] else { unreachable!() };
    let y = crate::heads::head_forward_raw(&head, &Matrix::from_rows(&[vec![0.0, 0.0, 1.0, 0.0]]).unwrap()).unwrap();
    for c in 0..3 {
        assert!((y.get(0, c) - value.get(2, c) * gate.get(2, c)).abs() < 1e-15);
    }
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let f = |v: &[f64]| crate::heads::head_forward_raw(&head, &Matrix::from_rows(&[v.to_vec()]).unwrap()).unwrap();
    assert_eq!(f(&x), f(&neg));

    let gated = build_head(&HeadConfig::glu(4, 3, 1, 1.0, Activation::Sigmoid), 0).unwrap();
    assert!(glu_bilinear_check(&gated, &x).is_err());
}

fn tuple(rng: &mut SeededRng, d: usize, m: usize, n: usize, ways: usize) -> TrainingTuple {
    let q = random(m, d, rng);
    let docs = (0..ways).map(|_| random(n, d, rng)).collect();
    let scores = (0..ways).map(|_| rng.normal()).collect();
    TrainingTuple::new(q, docs, scores).unwrap()
}

#[test]
fn audit_single_token_query_has_one_live_doc_row() {
    let mut rng = SeededRng::new(9);
    let head = build_head(&HeadConfig::linear(5, 3), 1).unwrap();
    let t = tuple(&mut rng, 5, 1, 2, 2);
    let before = head.clone();
    let audit = head_gradient_audit(&head, &t).unwrap();
    assert_eq!(audit.nonzero_doc_rows, vec![1, 1]);
    assert_eq!(audit.checked_losers, 2);
    assert_eq!(audit.loser_violations, 0);
    assert!(audit.max_rel_error() <= 1e-4);
    assert_eq!(head, before);
}

#[test]
fn audit_residual_glu_depth_two() {
    let mut rng = SeededRng::new(10);
    let cfg = HeadConfig::glu(6, 4, 2, 2.0, Activation::Gelu).with_residual(true);
    let head = build_head(&cfg, 3).unwrap();
    let audit = head_gradient_audit(&head, &tuple(&mut rng, 6, 3, 5, 4)).unwrap();
    assert!(audit.max_rel_error() <= 1e-4, "{:?}", audit.params);
    assert_eq!(audit.loser_violations, 0);
    assert!(audit.checked_losers > 0);
}

#[test]
fn report_covers_applicable_checks() {
    let mut rng = SeededRng::new(11);
    let t = tuple(&mut rng, 6, 3, 5, 4);
    let head = build_head(&HeadConfig::ffn(6, 3, 2, 1.0).with_residual(true), 2).unwrap();
    let report = run_diagnostics(&head, Some(&t), 0).unwrap();
    assert!(report.all_pass(), "{:#}", report.to_json());
    let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
    for expected in ["residual_metric_decomposition", "jacobian", "winner_sparsity", "head_gradient_audit"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("nuclear_norm_chain")));
    let skipped: Vec<&str> = report.not_applicable.iter().map(|n| n.name.as_str()).collect();
    assert_eq!(skipped, ["metric_trace_identity", "glu_bilinear"]);
    let json = report.to_json();
    for key in ["name", "claim", "inputs", "measured", "tolerance", "pass"] {
        assert!(json["checks"][0].get(key).is_some(), "{key}");
    }

    let bil = build_head(&HeadConfig::glu(6, 3, 1, 1.0, Activation::Identity).with_bias(false), 0).unwrap();
    let r = run_diagnostics(&bil, None, 0).unwrap();
    assert!(r.all_pass());
    assert!(r.checks.iter().any(|c| c.name == "glu_bilinear"));

    let lin = build_head(&HeadConfig::linear(6, 3), 0).unwrap();
    let r = run_diagnostics(&lin, None, 0).unwrap();
    assert!(r.all_pass() && r.checks.iter().any(|c| c.name == "metric_trace_identity"));
}
