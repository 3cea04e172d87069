//! Exhaustive MaxSim retrieval, NDCG, seed aggregation and significance tests.

mod metrics;
mod trec;

pub use metrics::{aggregate_seeds, ndcg_at_k, paired_t_test, NdcgReport, PValue, SeedAggregate, TTest};
pub use trec::{read_qrels, read_run, render_run, write_qrels, write_run};

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::heads::{head_forward, HeadParams};
use crate::maxsim::{maxsim_score, TokenMatrix};

/// Raw (un-projected) document tokens keyed by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    docs: BTreeMap<String, Matrix>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a document; ids must be unique and every document shares one dim.
    pub fn insert(&mut self, id: impl Into<String>, tokens: Matrix) -> Result<()> {
        let id = id.into();
        if tokens.rows() == 0 {
            return Err(Error::contract(format!("document '{id}' has no tokens")));
        }
        if let Some(d) = self.dim() {
            if tokens.cols() != d {
                return Err(Error::Shape {
                    op: "corpus insert",
                    left: (1, d),
                    right: tokens.shape(),
                });
            }
        }
        if self.docs.contains_key(&id) {
            return Err(Error::contract(format!("duplicate document id '{id}'")));
        }
        self.docs.insert(id, tokens);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Matrix> {
        self.docs.get(id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.docs.values().next().map(Matrix::cols)
    }

    /// Documents in id order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.docs.iter()
    }
}

/// Graded judgments `qid → docid → relevance`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: impl Into<String>, docid: impl Into<String>, rel: u32) -> Result<()> {
        let (qid, docid) = (qid.into(), docid.into());
        let per_query = self.judgments.entry(qid.clone()).or_default();
        if per_query.insert(docid.clone(), rel).is_some() {
            return Err(Error::contract(format!("duplicate judgment for ({qid}, {docid})")));
        }
        Ok(())
    }

    pub fn query(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn relevance(&self, qid: &str, docid: &str) -> u32 {
        self.query(qid).and_then(|q| q.get(docid)).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeMap<String, u32>)> {
        self.judgments.iter()
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ranked results for one query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RunEntry {
    pub qid: String,
    pub ranked: Vec<(String, f64)>,
}

/// Descending score, ties broken by ascending document id.
pub fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

fn project(head: &HeadParams, raw: &Matrix) -> Result<TokenMatrix> {
    Ok(TokenMatrix::from_head_output(head_forward(head, raw)?))
}

/// Scores every query against every document and keeps the best `top_k`.
pub fn exact_search(
    queries: &BTreeMap<String, Matrix>,
    corpus: &Corpus,
    head: &HeadParams,
    top_k: usize,
) -> Result<Vec<RunEntry>> {
    if corpus.is_empty() {
        return Err(Error::contract("exact_search: corpus is empty"));
    }
    if top_k == 0 {
        return Err(Error::contract("exact_search: top_k must be at least 1"));
    }
    let docs: Vec<(&String, TokenMatrix)> = corpus
        .docs
        .par_iter()
        .map(|(id, raw)| Ok((id, project(head, raw)?)))
        .collect::<Result<_>>()?;
    queries
        .iter()
        .map(|(qid, raw)| {
            let q = project(head, raw)?;
            let mut ranked: Vec<(String, f64)> = docs
                .par_iter()
                .map(|(id, d)| Ok(((*id).clone(), maxsim_score(&q, d)?)))
                .collect::<Result<_>>()?;
            ranked.sort_by(rank_order);
            ranked.truncate(top_k);
            Ok(RunEntry {
                qid: qid.clone(),
                ranked,
            })
        })
        .collect()
}
