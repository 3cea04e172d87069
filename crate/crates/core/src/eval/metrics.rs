use std::collections::BTreeMap;
use std::fmt;

use serde_json::{json, Value};
use statrs::function::beta::beta_reg;

use super::{rank_order, Qrels, RunEntry};
use crate::error::{Error, Result};

/// Per-query NDCG@k and the mean over judged queries.
#[derive(Clone, Debug, PartialEq)]
pub struct NdcgReport {
    pub k: usize,
    pub per_query: BTreeMap<String, f64>,
    /// `None` when no query could be evaluated.
    pub mean: Option<f64>,
    /// Queries whose judgments contain no relevant document.
    pub skipped_no_relevant: usize,
    /// Run queries absent from the qrels.
    pub missing_from_qrels: usize,
}

impl NdcgReport {
    pub fn to_json(&self) -> Value {
        json!({
            "k": self.k,
            "gain": "2^rel - 1",
            "discount": "log2(rank + 1)",
            "mean": self.mean,
            "evaluated": self.per_query.len(),
            "skipped_no_relevant": self.skipped_no_relevant,
            "missing_from_qrels": self.missing_from_qrels,
            "per_query": self.per_query,
        })
    }
}

fn dcg(rels: impl Iterator<Item = u32>) -> f64 {
    rels.enumerate()
        .map(|(i, rel)| (2f64.powi(rel as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@k with gain `2^rel − 1` and discount `log₂(rank + 1)`.
pub fn ndcg_at_k(run: &[RunEntry], qrels: &Qrels, k: usize) -> Result<NdcgReport> {
    if k == 0 {
        return Err(Error::contract("ndcg_at_k: k must be at least 1"));
    }
    let mut report = NdcgReport {
        k,
        per_query: BTreeMap::new(),
        mean: None,
        skipped_no_relevant: 0,
        missing_from_qrels: 0,
    };
    for entry in run {
        let Some(judged) = qrels.query(&entry.qid) else {
            report.missing_from_qrels += 1;
            continue;
        };
        let mut ideal: Vec<u32> = judged.values().copied().filter(|&r| r > 0).collect();
        if ideal.is_empty() {
            report.skipped_no_relevant += 1;
            continue;
        }
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg = dcg(ideal.into_iter().take(k));

        let mut ranked = entry.ranked.clone();
        ranked.sort_by(rank_order);
        let gains = ranked.iter().take(k).map(|(d, _)| judged.get(d).copied().unwrap_or(0));
        report.per_query.insert(entry.qid.clone(), dcg(gains) / idcg);
    }
    if !report.per_query.is_empty() {
        report.mean = Some(report.per_query.values().sum::<f64>() / report.per_query.len() as f64);
    }
    Ok(report)
}

/// Mean and sample standard deviation of per-seed results.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedAggregate {
    pub n: usize,
    pub mean: f64,
    /// `None` for a single seed.
    pub sd: Option<f64>,
}

pub fn aggregate_seeds(per_seed_means: &[f64]) -> Result<SeedAggregate> {
    let n = per_seed_means.len();
    if n == 0 {
        return Err(Error::contract("aggregate_seeds: no values"));
    }
    let mean = per_seed_means.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| {
        let ss: f64 = per_seed_means.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(SeedAggregate { n, mean, sd })
}

/// Two-sided p-value; degenerate zero-variance differences report a floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PValue {
    Value(f64),
    BelowFloor,
}

impl PValue {
    pub const FLOOR: f64 = 1e-12;

    /// Numeric value, with [`PValue::BelowFloor`] mapped to 0.
    pub fn as_f64(self) -> f64 {
        match self {
            PValue::Value(p) => p,
            PValue::BelowFloor => 0.0,
        }
    }

    pub fn to_json(self) -> Value {
        match self {
            PValue::Value(p) => json!(p),
            PValue::BelowFloor => json!(self.to_string()),
        }
    }
}

impl fmt::Display for PValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PValue::Value(p) => write!(f, "{p}"),
            PValue::BelowFloor => write!(f, "< {:e}", Self::FLOOR),
        }
    }
}

/// Paired t statistic on `a − b` with `n − 1` degrees of freedom.
#[derive(Clone, Debug, PartialEq)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    /// Infinite when the differences are constant and nonzero.
    pub t: f64,
    pub p: PValue,
}

impl TTest {
    pub fn to_json(&self) -> Value {
        let t = if self.t.is_finite() {
            json!(self.t)
        } else {
            json!(if self.t > 0.0 { "inf" } else { "-inf" })
        };
        json!({"n": self.n, "mean_diff": self.mean_diff, "t": t, "p": self.p.to_json()})
    }
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::contract(format!(
            "paired_t_test: need equal lengths ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(TTest {
            n,
            mean_diff: 0.0,
            t: 0.0,
            p: PValue::Value(1.0),
        });
    }
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(TTest {
            n,
            mean_diff: mean,
            t: mean.signum() * f64::INFINITY,
            p: PValue::BelowFloor,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    // P(|T| > |t|) = I_{df/(df+t²)}(df/2, 1/2)
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok(TTest {
        n,
        mean_diff: mean,
        t,
        p: PValue::Value(p),
    })
}
