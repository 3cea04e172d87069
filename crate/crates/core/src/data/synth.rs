use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::eval::{Corpus, Qrels};
use crate::rng::SeededRng;
use crate::train::TrainingTuple;

use super::{DOC_TOKEN_CAP, QUERY_TOKEN_CAP};

/// Parameters of the planted-metric generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub vocab_size: usize,
    pub query_tokens: usize,
    pub doc_tokens: usize,
    pub n_way: usize,
    pub tuple_count: usize,
    /// Number of clusters and rank of each cluster's metric.
    pub planted_rank: usize,
    pub sharpness: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Spread of a token occurrence around its vocabulary vector, as seen by the student.
    pub context_sigma: f64,
    pub eval_queries: usize,
    pub eval_docs_per_query: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 32,
            vocab_size: 512,
            query_tokens: 8,
            doc_tokens: 24,
            n_way: 16,
            tuple_count: 2000,
            planted_rank: 4,
            sharpness: 2.0,
            noise_sigma: 0.1,
            seed: 0,
            context_sigma: 0.5,
            eval_queries: 50,
            eval_docs_per_query: 9,
        }
    }
}

/// Vocabulary vectors sit at `μ_c + TOKEN_SPREAD·N(0, I)` around their cluster mean.
const TOKEN_SPREAD: f64 = 1.0;
const MAX_RESAMPLES: usize = 1000;

impl SynthConfig {
    pub fn cluster_size(&self, cluster: usize) -> usize {
        (self.vocab_size + self.planted_rank - 1 - cluster) / self.planted_rank
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.d == 0 || c.query_tokens == 0 || c.doc_tokens == 0 {
            return Err(Error::config("d, query_tokens and doc_tokens must be positive"));
        }
        if c.planted_rank == 0 || c.planted_rank >= c.d {
            return Err(Error::config(format!(
                "planted_rank must satisfy 0 < r < d, got r={} d={}",
                c.planted_rank, c.d
            )));
        }
        if c.query_tokens > QUERY_TOKEN_CAP || c.doc_tokens > DOC_TOKEN_CAP {
            return Err(Error::config(format!(
                "token counts are capped at {QUERY_TOKEN_CAP} (query) and {DOC_TOKEN_CAP} (document)"
            )));
        }
        if c.doc_tokens < c.query_tokens {
            return Err(Error::config("doc_tokens must be at least query_tokens (positives contain every query token)"));
        }
        if c.n_way < 2 {
            return Err(Error::config("n_way must be at least 2"));
        }
        let smallest = c.cluster_size(c.planted_rank - 1);
        if smallest < c.query_tokens + 1 {
            return Err(Error::config(format!(
                "vocab_size {} gives clusters of {smallest} tokens; need at least query_tokens + 1 = {}",
                c.vocab_size,
                c.query_tokens + 1
            )));
        }
        if !(c.sharpness.is_finite() && c.sharpness > 0.0) {
            return Err(Error::config("sharpness must be positive"));
        }
        for (name, v) in [("noise_sigma", c.noise_sigma), ("context_sigma", c.context_sigma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Training tuples plus a held-out retrieval set from the same generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub tuples: Vec<TrainingTuple>,
    pub queries: BTreeMap<String, Matrix>,
    pub corpus: Corpus,
    pub qrels: Qrels,
}

/// Generator state: clean vocabulary and per-cluster metric factors.
struct World {
    vocab: Vec<Vec<f64>>,
    /// `Gᵀv / ‖Gᵀv‖` for every token under its own cluster's metric.
    metric_unit: Vec<Vec<f64>>,
    clusters: Vec<Vec<usize>>,
}

impl World {
    fn new(c: &SynthConfig, rng: &mut SeededRng) -> Self {
        let r = c.planted_rank;
        let means: Vec<Vec<f64>> = (0..r).map(|_| (0..c.d).map(|_| rng.normal()).collect()).collect();
        let factors: Vec<Matrix> = (0..r).map(|_| Matrix::from_fn(c.d, r, |_, _| rng.normal())).collect();
        let vocab: Vec<Vec<f64>> = (0..c.vocab_size)
            .map(|v| means[v % r].iter().map(|m| m + TOKEN_SPREAD * rng.normal()).collect())
            .collect();
        let metric_unit = vocab
            .iter()
            .enumerate()
            .map(|(v, x)| {
                let g = &factors[v % r];
                let proj: Vec<f64> = (0..r).map(|k| (0..c.d).map(|i| x[i] * g.get(i, k)).sum()).collect();
                let norm = proj.iter().map(|p| p * p).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                proj.iter().map(|p| p / norm).collect()
            })
            .collect();
        let clusters = (0..r).map(|k| (k..c.vocab_size).step_by(r).collect()).collect();
        Self {
            vocab,
            metric_unit,
            clusters,
        }
    }

    /// Noise-free teacher MaxSim under the query cluster's metric.
    fn clean_score(&self, query: &[usize], doc: &[usize]) -> f64 {
        query
            .iter()
            .map(|&q| {
                doc.iter()
                    .map(|&t| dot(&self.metric_unit[q], &self.metric_unit[t]))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum()
    }

    /// Student-visible occurrences: each token vector plus context noise.
    fn observe(&self, ids: &[usize], sigma: f64, rng: &mut SeededRng) -> Matrix {
        let d = self.vocab[0].len();
        Matrix::from_fn(ids.len(), d, |r, c| self.vocab[ids[r]][c] + sigma * rng.normal())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Episode {
    query: Vec<usize>,
    /// Positive first, then negatives with their overlap counts.
    docs: Vec<(Vec<usize>, usize)>,
}

fn fillers(pool: &[usize], exclude: &[usize], count: usize, rng: &mut SeededRng) -> Vec<usize> {
    let allowed: Vec<usize> = pool.iter().copied().filter(|t| !exclude.contains(t)).collect();
    (0..count).map(|_| allowed[rng.below(allowed.len())]).collect()
}

fn episode(c: &SynthConfig, world: &World, negatives: usize, rng: &mut SeededRng) -> Result<Episode> {
    let m = c.query_tokens;
    let cluster = &world.clusters[rng.below(c.planted_rank)];
    let query: Vec<usize> = rng.sample_distinct(cluster.len(), m).into_iter().map(|i| cluster[i]).collect();

    let mut positive = query.clone();
    positive.extend(fillers(cluster, &query, c.doc_tokens - m, rng));
    rng.shuffle(&mut positive);
    let mut docs = vec![(positive, m)];

    for _ in 0..negatives {
        let mut attempts = 0;
        loop {
            let overlap = rng.below(m);
            let mut doc: Vec<usize> = rng.sample_distinct(m, overlap).into_iter().map(|i| query[i]).collect();
            doc.extend(fillers(cluster, &query, c.doc_tokens - overlap, rng));
            rng.shuffle(&mut doc);
            if world.clean_score(&query, &doc) < m as f64 - 1e-9 {
                docs.push((doc, overlap));
                break;
            }
            attempts += 1;
            if attempts >= MAX_RESAMPLES {
                return Err(Error::config(
                    "could not draw a negative scoring below the positive; raise planted_rank or vocab_size",
                ));
            }
        }
    }
    Ok(Episode { query, docs })
}

/// Builds a dataset whose teacher scores follow a cluster-specific low-rank metric.
///
/// Vocabulary token `v` belongs to cluster `v mod r`; cluster `c` scores
/// similarity as cosine under `M_c = G_c G_cᵀ` with a Gaussian `d × r`
/// factor `G_c`. Each query draws distinct tokens from one cluster; its
/// positive holds all of them plus same-cluster fillers, each negative a
/// strict subset. Teacher score is `sharpness · MaxSim_M + N(0, noise_sigma²)`
/// over clean vocabulary vectors; the student sees noisy occurrences.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut world_rng = SeededRng::derived(config.seed, 0);
    let world = World::new(config, &mut world_rng);

    let mut rng = SeededRng::derived(config.seed, 1);
    let mut tuples = Vec::with_capacity(config.tuple_count);
    for _ in 0..config.tuple_count {
        let ep = episode(config, &world, config.n_way - 1, &mut rng)?;
        let query = world.observe(&ep.query, config.context_sigma, &mut rng);
        let mut docs = Vec::with_capacity(ep.docs.len());
        let mut scores = Vec::with_capacity(ep.docs.len());
        for (ids, _) in &ep.docs {
            docs.push(world.observe(ids, config.context_sigma, &mut rng));
            let clean = world.clean_score(&ep.query, ids);
            scores.push(config.sharpness * clean + config.noise_sigma * rng.normal());
        }
        tuples.push(TrainingTuple::new(query, docs, scores)?);
    }

    let mut rng = SeededRng::derived(config.seed, 2);
    let mut queries = BTreeMap::new();
    let mut corpus = Corpus::new();
    let mut qrels = Qrels::new();
    for qi in 0..config.eval_queries {
        let ep = episode(config, &world, config.eval_docs_per_query, &mut rng)?;
        let qid = format!("q{qi}");
        queries.insert(qid.clone(), world.observe(&ep.query, config.context_sigma, &mut rng));
        for (j, (ids, overlap)) in ep.docs.iter().enumerate() {
            let did = format!("d{qi}_{j}");
            corpus.insert(did.clone(), world.observe(ids, config.context_sigma, &mut rng))?;
            let rel = if j == 0 {
                2
            } else if 2 * overlap >= config.query_tokens {
                1
            } else {
                0
            };
            qrels.insert(qid.clone(), did, rel)?;
        }
    }
    Ok(SynthDataset {
        config: config.clone(),
        tuples,
        queries,
        corpus,
        qrels,
    })
}
