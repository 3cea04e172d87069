//! Dense matrices, a reverse-mode tape, and a central-difference oracle.

mod activation;
mod matrix;
mod tape;

pub use activation::Activation;
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::{first_argmax, kl_divergence};

/// Denominator clamp for row normalization; all-zero rows stay zero.
pub const NORM_EPS: f64 = 1e-12;

pub fn apply_activation(x: &Matrix, kind: Activation) -> Matrix {
    x.map(|v| kind.apply(v))
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn row_l2_normalize(x: &Matrix, eps: f64) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let denom = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}

/// Central differences `(f(X + hEᵢⱼ) − f(X − hEᵢⱼ)) / 2h` for every entry of `x`.
pub fn finite_difference_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.values_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.values_mut()[i] = orig;
        grad.values_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    let diff: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.frobenius_norm().max(b.frobenius_norm()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        // small LCG, enough for test inputs in [-1, 1]
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn normalize_examples() {
        let x = Matrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let y = row_l2_normalize(&x, NORM_EPS);
        assert!((y.get(0, 0) - 0.6).abs() < 1e-15 && (y.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(y.row(1), &[1.0, 0.0]);
        assert_eq!(y.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn sigmoid_identity_relu_elementwise() {
        let x = Matrix::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        assert_eq!(apply_activation(&x, Activation::Identity), x);
        assert_eq!(apply_activation(&x, Activation::Relu).values(), &[0.0, 2.0]);
        assert_eq!(apply_activation(&Matrix::scalar(0.0), Activation::Sigmoid).values(), &[0.5]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_x() {
        let x0 = random_matrix(3, 2, 1);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x), x0.scale(2.0));
    }

    #[test]
    fn backward_linear_and_untouched() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let w = tape.leaf(Matrix::from_rows(&[vec![0.3], vec![-0.2]]).unwrap());
        let unused = tape.leaf(Matrix::filled(2, 2, 5.0));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).values(), &[1.0, 1.0]);
        assert_eq!(g.get(unused), Matrix::zeros(2, 2));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn two_consumers_accumulate_like_single_consumer() {
        // loss = sum(x·A) + sum(x·B) must equal sum(x·(A+B)) in gradient.
        let x0 = random_matrix(2, 3, 7);
        let a0 = random_matrix(3, 2, 8);
        let b0 = random_matrix(3, 2, 9);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let xa = tape.matmul(x, a).unwrap();
        let xb = tape.matmul(x, b).unwrap();
        let s1 = tape.sum(xa);
        let s2 = tape.sum(xb);
        let loss = tape.add(s1, s2).unwrap();
        let split = tape.backward(loss).unwrap().get(x);

        let mut tape = Tape::new();
        let x = tape.leaf(x0);
        let ab = tape.leaf(a0.add(&b0).unwrap());
        let y = tape.matmul(x, ab).unwrap();
        let loss = tape.sum(y);
        let joint = tape.backward(loss).unwrap().get(x);
        assert!(relative_error(&split, &joint, 1e-300) < 1e-14);
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_grad(|m| m.get(0, 0).powi(2), &Matrix::scalar(3.0), 1e-5);
        assert!((g.get(0, 0) - 6.0).abs() < 1e-8);
        for x in [-4.0, 0.0, 11.0] {
            let g = finite_difference_grad(|m| 2.5 * m.get(0, 0), &Matrix::scalar(x), 1e-5);
            assert!((g.get(0, 0) - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn maxsim_backward_matches_finite_differences() {
        // Q 3×4, D 5×4 random, normalized inside the differentiated function.
        let q0 = random_matrix(3, 4, 21);
        let d0 = random_matrix(5, 4, 22);
        let score = |q: &Matrix, d: &Matrix| {
            let mut t = Tape::new();
            let q = t.leaf(q.clone());
            let d = t.leaf(d.clone());
            let qn = t.row_l2_normalize(q, NORM_EPS).unwrap();
            let dn = t.row_l2_normalize(d, NORM_EPS).unwrap();
            let s = t.maxsim(qn, dn).unwrap();
            (t.value(s).get(0, 0), t.backward(s).unwrap().get(q), t.backward(s).unwrap().get(d))
        };
        let (_, gq, gd) = score(&q0, &d0);
        let fq = finite_difference_grad(|q| score(q, &d0).0, &q0, 1e-5);
        let fd = finite_difference_grad(|d| score(&q0, d).0, &d0, 1e-5);
        assert!(relative_error(&gq, &fq, 1e-12) < 1e-4);
        assert!(relative_error(&gd, &fd, 1e-12) < 1e-4);
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let x0 = random_matrix(4, 3, 31);
        let w0 = random_matrix(3, 5, 32);
        let b0 = random_matrix(1, 5, 33);
        for act in Activation::ALL {
            let f = |w: &Matrix| -> (f64, Matrix) {
                let mut t = Tape::new();
                let x = t.leaf(x0.clone());
                let w = t.leaf(w.clone());
                let b = t.leaf(b0.clone());
                let alpha = t.leaf(Matrix::scalar(0.7));
                let xw = t.matmul(x, w).unwrap();
                let z = t.add_row(xw, b).unwrap();
                let a = t.activation(z, act);
                let g = t.mul(a, z).unwrap();
                let s = t.scale_by(g, alpha).unwrap();
                let n = t.row_l2_normalize(s, NORM_EPS).unwrap();
                let c = t.scale_const(n, 1.5);
                let loss = t.sum(c);
                (t.value(loss).get(0, 0), t.backward(loss).unwrap().get(w))
            };
            let (_, g) = f(&w0);
            let fd = finite_difference_grad(|w| f(w).0, &w0, 1e-5);
            assert!(relative_error(&g, &fd, 1e-12) < 1e-4, "{act}");
        }
    }

    #[test]
    fn slice_rows_routes_gradient_to_its_rows() {
        let mut t = Tape::new();
        let x = t.leaf(random_matrix(5, 2, 51));
        let top = t.slice_rows(x, 1, 3).unwrap();
        let rest = t.slice_rows(x, 2, 5).unwrap();
        let a = t.sum(top);
        let b = t.sum(rest);
        let both = t.add(a, b).unwrap();
        let g = t.backward(both).unwrap().get(x);
        let expected = [0.0, 1.0, 2.0, 1.0, 1.0];
        for (r, e) in expected.iter().enumerate() {
            assert_eq!(g.row(r), &[*e, *e]);
        }
        assert!(t.slice_rows(x, 4, 6).is_err());
    }

    #[test]
    fn kl_node_gradient_matches_finite_differences() {
        let teacher = [0.3, -1.2, 2.0, 0.5];
        let s0 = Matrix::from_rows(&[vec![0.1, 0.4, -0.3, 1.1]]).unwrap();
        let f = |s: &Matrix| {
            let mut t = Tape::new();
            let parts: Vec<Var> = s.values().iter().map(|&v| t.leaf(Matrix::scalar(v))).collect();
            let row = t.concat_scalars(&parts).unwrap();
            let loss = t.kl_div(row, &teacher).unwrap();
            let g = t.backward(loss).unwrap();
            let grad = Matrix::from_vec(1, 4, parts.iter().map(|&p| g.get(p).get(0, 0)).collect()).unwrap();
            (t.value(loss).get(0, 0), grad)
        };
        let fd = finite_difference_grad(|s| f(s).0, &s0, 1e-5);
        assert!(relative_error(&f(&s0).1, &fd, 1e-12) < 1e-6);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(random_matrix(5, 6, 41));
            let w = t.leaf(random_matrix(6, 3, 42));
            let y = t.matmul(x, w).unwrap();
            let a = t.activation(y, Activation::Gelu);
            let n = t.row_l2_normalize(a, NORM_EPS).unwrap();
            let s = t.sum(n);
            (t.value(n).clone(), t.backward(s).unwrap().get(w))
        };
        assert_eq!(run(), run());
    }
}
