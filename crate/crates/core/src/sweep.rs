//! Multi-seed variant-vs-baseline comparisons on a held-out retrieval set.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::eval::{aggregate_seeds, exact_search, ndcg_at_k, paired_t_test, Corpus, NdcgReport, Qrels, RunEntry, SeedAggregate, TTest};
use crate::heads::{HeadConfig, HeadParams};
use crate::train::{train_head, LossTrace, TrainConfig, TrainingTuple};

/// Training tuples plus the retrieval set used for scoring.
#[derive(Clone, Copy, Debug)]
pub struct SweepData<'a> {
    pub tuples: &'a [TrainingTuple],
    pub queries: &'a BTreeMap<String, Matrix>,
    pub corpus: &'a Corpus,
    pub qrels: &'a Qrels,
}

#[derive(Clone, Debug)]
pub struct SweepSettings {
    pub variant: HeadConfig,
    pub baseline: HeadConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub top_k: usize,
    pub ndcg_k: usize,
    /// Final loss is the mean over this many trailing steps.
    pub loss_window: usize,
}

/// One trained head with its trace and held-out results.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub params: HeadParams,
    pub trace: LossTrace,
    pub final_loss: f64,
    pub run: Vec<RunEntry>,
    pub ndcg: NdcgReport,
}

impl ArmResult {
    pub fn ndcg_mean(&self) -> f64 {
        self.ndcg.mean.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub variant: ArmResult,
    pub baseline: ArmResult,
}

/// Trains and evaluates one head for one seed.
pub fn run_arm(config: &HeadConfig, train: &TrainConfig, data: SweepData<'_>, settings: &SweepSettings) -> Result<ArmResult> {
    let (params, trace) = train_head(config, train, data.tuples)?;
    let run = exact_search(data.queries, data.corpus, &params, settings.top_k)?;
    let ndcg = ndcg_at_k(&run, data.qrels, settings.ndcg_k)?;
    if ndcg.mean.is_none() {
        return Err(Error::contract("held-out set has no judged queries"));
    }
    Ok(ArmResult {
        final_loss: trace.tail_mean(settings.loss_window),
        params,
        trace,
        run,
        ndcg,
    })
}

pub fn run_seed(seed: u64, data: SweepData<'_>, settings: &SweepSettings) -> Result<SeedResult> {
    let train = TrainConfig {
        seed,
        ..settings.train.clone()
    };
    Ok(SeedResult {
        seed,
        variant: run_arm(&settings.variant, &train, data, settings)?,
        baseline: run_arm(&settings.baseline, &train, data, settings)?,
    })
}

/// Seed means, spreads and paired tests over completed seeds.
#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub seeds: Vec<u64>,
    pub variant_ndcg: SeedAggregate,
    pub baseline_ndcg: SeedAggregate,
    pub variant_loss: SeedAggregate,
    pub baseline_loss: SeedAggregate,
    /// Variant minus baseline.
    pub ndcg_delta: f64,
    /// `None` with fewer than two seeds.
    pub ndcg_test: Option<TTest>,
    pub loss_test: Option<TTest>,
}

pub fn summarize(results: &[SeedResult]) -> Result<SweepSummary> {
    let pick = |f: &dyn Fn(&SeedResult) -> f64| results.iter().map(f).collect::<Vec<f64>>();
    let vn = pick(&|r| r.variant.ndcg_mean());
    let bn = pick(&|r| r.baseline.ndcg_mean());
    let vl = pick(&|r| r.variant.final_loss);
    let bl = pick(&|r| r.baseline.final_loss);
    let two = results.len() >= 2;
    let variant_ndcg = aggregate_seeds(&vn)?;
    let baseline_ndcg = aggregate_seeds(&bn)?;
    Ok(SweepSummary {
        seeds: results.iter().map(|r| r.seed).collect(),
        ndcg_delta: variant_ndcg.mean - baseline_ndcg.mean,
        variant_ndcg,
        baseline_ndcg,
        variant_loss: aggregate_seeds(&vl)?,
        baseline_loss: aggregate_seeds(&bl)?,
        ndcg_test: if two { Some(paired_t_test(&vn, &bn)?) } else { None },
        loss_test: if two { Some(paired_t_test(&vl, &bl)?) } else { None },
    })
}

fn agg_json(a: &SeedAggregate) -> Value {
    json!({"n": a.n, "mean": a.mean, "sd": a.sd})
}

fn test_json(t: &Option<TTest>) -> Value {
    match t {
        Some(t) => t.to_json(),
        None => json!("insufficient seeds"),
    }
}

impl SweepSummary {
    pub fn to_json(&self) -> Value {
        json!({
            "seeds": self.seeds,
            "ndcg": {
                "variant": agg_json(&self.variant_ndcg),
                "baseline": agg_json(&self.baseline_ndcg),
                "delta": self.ndcg_delta,
                "paired_t_test": test_json(&self.ndcg_test),
            },
            "final_loss": {
                "variant": agg_json(&self.variant_loss),
                "baseline": agg_json(&self.baseline_loss),
                "paired_t_test": test_json(&self.loss_test),
            },
        })
    }
}

pub fn seed_row(r: &SeedResult) -> Value {
    json!({
        "seed": r.seed,
        "variant": {"ndcg": r.variant.ndcg_mean(), "final_loss": r.variant.final_loss, "checksum": r.variant.trace.checksum},
        "baseline": {"ndcg": r.baseline.ndcg_mean(), "final_loss": r.baseline.final_loss, "checksum": r.baseline.trace.checksum},
    })
}
