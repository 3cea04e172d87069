//! MaxSim late-interaction scoring and its winner-takes-all gradient.
//!
//! For unit-normalized query rows `q̂ᵢ` and document rows `d̂ⱼ`:
//!
//! ```text
//! score(Q, D) = Σᵢ maxⱼ q̂ᵢ·d̂ⱼ
//! j*(i)       = argmaxⱼ q̂ᵢ·d̂ⱼ            (lowest j on ties)
//! ∂score/∂q̂ᵢ  = d̂_{j*(i)}
//! ∂score/∂d̂ⱼ  = Σ_{i : j*(i) = j} q̂ᵢ     (zero for every non-winner)
//! ```

use rayon::prelude::*;

use crate::autodiff::{first_argmax, row_l2_normalize, Matrix, NORM_EPS};
use crate::error::{Error, Result};

/// Rows must be unit-norm within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Token vectors for one query or document, every row unit-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix(Matrix);

impl TokenMatrix {
    /// Wraps `rows`, rejecting any row whose norm is not 1 within [`UNIT_TOLERANCE`].
    pub fn new(rows: Matrix) -> Result<Self> {
        for r in 0..rows.rows() {
            let norm = rows.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::contract(format!("token row {r} has norm {norm}, expected 1")));
            }
        }
        Ok(Self(rows))
    }

    /// Wraps head output as-is: rows collapsed by the normalization clamp are
    /// kept (they score 0 against everything) instead of being rejected.
    pub(crate) fn from_head_output(rows: Matrix) -> Self {
        Self(rows)
    }

    /// Normalizes raw rows first.
    pub fn normalized(raw: &Matrix) -> Result<Self> {
        Self::new(row_l2_normalize(raw, NORM_EPS))
    }

    pub fn token_count(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Winning document token per query token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WinnerAssignment(pub Vec<usize>);

impl WinnerAssignment {
    pub fn distinct(&self) -> usize {
        let mut w = self.0.clone();
        w.sort_unstable();
        w.dedup();
        w.len()
    }
}

fn check_pair(q: &TokenMatrix, d: &TokenMatrix) -> Result<()> {
    if q.token_count() == 0 || d.token_count() == 0 {
        return Err(Error::contract(format!(
            "maxsim needs non-empty inputs, got {} query and {} document tokens",
            q.token_count(),
            d.token_count()
        )));
    }
    if q.dim() != d.dim() {
        return Err(Error::contract(format!(
            "maxsim dimension mismatch: query {} vs document {}",
            q.dim(),
            d.dim()
        )));
    }
    Ok(())
}

// Returns (winner, best similarity) per query token.
fn scan(q: &TokenMatrix, d: &TokenMatrix) -> Vec<(usize, f64)> {
    let mut sims = vec![0.0; d.token_count()];
    (0..q.token_count())
        .map(|i| {
            let qi = q.0.row(i);
            for (j, s) in sims.iter_mut().enumerate() {
                *s = qi.iter().zip(d.0.row(j)).map(|(a, b)| a * b).sum();
            }
            first_argmax(&sims)
        })
        .collect()
}

pub fn maxsim_score(q: &TokenMatrix, d: &TokenMatrix) -> Result<f64> {
    check_pair(q, d)?;
    Ok(scan(q, d).iter().map(|&(_, s)| s).sum())
}

pub fn winners(q: &TokenMatrix, d: &TokenMatrix) -> Result<WinnerAssignment> {
    check_pair(q, d)?;
    Ok(WinnerAssignment(scan(q, d).into_iter().map(|(j, _)| j).collect()))
}

/// Closed-form gradient of the score with respect to the normalized rows.
pub fn maxsim_grad(q: &TokenMatrix, d: &TokenMatrix) -> Result<(Matrix, Matrix)> {
    let w = winners(q, d)?;
    let mut dq = Matrix::zeros(q.token_count(), q.dim());
    let mut dd = Matrix::zeros(d.token_count(), d.dim());
    for (i, &j) in w.0.iter().enumerate() {
        dq.row_mut(i).copy_from_slice(d.0.row(j));
        for (acc, v) in dd.row_mut(j).iter_mut().zip(q.0.row(i)) {
            *acc += v;
        }
    }
    Ok((dq, dd))
}

/// Scores one query against many candidates, preserving order.
pub fn score_batch(q: &TokenMatrix, docs: &[TokenMatrix]) -> Result<Vec<f64>> {
    if let Some(bad) = docs
        .iter()
        .position(|d| d.dim() != q.dim() || d.token_count() == 0)
    {
        return Err(Error::contract(format!(
            "candidate {bad} incompatible with query (dim {} vs {}, {} tokens)",
            docs[bad].dim(),
            q.dim(),
            docs[bad].token_count()
        )));
    }
    docs.par_iter().map(|d| maxsim_score(q, d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tm(rows: &[&[f64]]) -> TokenMatrix {
        TokenMatrix::new(Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap())
            .unwrap()
    }

    #[test]
    fn score_examples() {
        let e1 = tm(&[&[1.0, 0.0]]);
        assert_eq!(maxsim_score(&e1, &e1).unwrap(), 1.0);

        let q = tm(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let d = tm(&[&[1.0, 0.0], &[0.6, 0.8]]);
        assert!((maxsim_score(&q, &d).unwrap() - 1.8).abs() < 1e-15);

        let q = tm(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        let d = tm(&[&[1.0, 0.0], &[0.6, 0.8]]);
        assert!((maxsim_score(&q, &d).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let q = tm(&[&[1.0, 0.0]]);
        let d = tm(&[&[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(winners(&q, &d).unwrap(), WinnerAssignment(vec![1]));
    }

    #[test]
    fn grad_single_token_zero_branch() {
        let q = tm(&[&[0.6, 0.8]]);
        let d = tm(&[&[0.8, 0.6], &[-1.0, 0.0]]);
        let (dq, dd) = maxsim_grad(&q, &d).unwrap();
        assert_eq!(dq.row(0), d.as_matrix().row(0));
        assert_eq!(dd.row(0), q.as_matrix().row(0));
        assert_eq!(dd.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn contract_errors() {
        let q = tm(&[&[1.0, 0.0]]);
        let d3 = tm(&[&[1.0, 0.0, 0.0]]);
        assert!(maxsim_score(&q, &d3).is_err());
        let empty = TokenMatrix::new(Matrix::zeros(0, 2)).unwrap();
        assert!(maxsim_score(&q, &empty).is_err());
        let err = score_batch(&q, &[q.clone(), d3]).unwrap_err();
        assert!(err.to_string().contains("candidate 1"));
        assert!(TokenMatrix::new(Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap()).is_err());
    }
}
