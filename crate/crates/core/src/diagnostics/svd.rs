use crate::autodiff::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Singular values in descending order, via one-sided Jacobi rotations.
///
/// Columns of the taller orientation are orthogonalized pairwise until every
/// pair is numerically orthogonal; the column norms are then the singular
/// values. Returns `min(rows, cols)` values.
pub fn singular_spectrum(w: &Matrix) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::contract("singular_spectrum: empty matrix"));
    }
    let a = if w.rows() >= w.cols() { w.clone() } else { w.transpose() };
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xv, yv) = (*x, *y);
                    *x = c * xv - s * yv;
                    *y = s * xv + c * yv;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

pub fn nuclear_norm(w: &Matrix) -> Result<f64> {
    Ok(singular_spectrum(w)?.iter().sum())
}

/// `|Σσᵢ² − ‖W‖_F²| / max(‖W‖_F², 1)`.
pub fn parseval_residual(w: &Matrix, sigma: &[f64]) -> f64 {
    let fro2 = w.frobenius_norm().powi(2);
    (sigma.iter().map(|s| s * s).sum::<f64>() - fro2).abs() / fro2.max(1.0)
}
