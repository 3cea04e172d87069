//! Flat `key = value` experiment configuration.
//!
//! Every key has a default; a config file and `--key value` flags layer on
//! top, with flags winning. Each resolved value remembers which layer it
//! came from.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Value};

use crate::autodiff::Activation;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::heads::{Family, HeadConfig};
use crate::train::TrainConfig;

/// `(key, default, help)`
pub const SCHEMA: &[(&str, &str, &str)] = &[
    // head
    ("output_dim", "16", "head output dimension k"),
    ("family", "ffn", "ffn or glu"),
    ("depth", "1", "number of head layers"),
    ("rho", "1", "intermediate width multiplier"),
    ("activation", "identity", "activation between layers"),
    ("gate", "sigmoid", "GLU gate nonlinearity"),
    ("residual", "false", "skip connections on non-final blocks"),
    ("bias", "auto", "layer biases: true, false, or auto (on when depth > 1)"),
    ("alpha_init", "1", "initial residual multiplier"),
    // training
    ("batch_size", "64", "tuples per step"),
    ("peak_lr", "1e-4", "peak learning rate"),
    ("warmup_fraction", "0.1", "share of steps spent warming up"),
    ("total_steps", "1000", "optimizer steps"),
    ("weight_decay", "0.01", "decoupled weight decay"),
    ("seed", "0", "head init and shuffling seed"),
    ("beta1", "0.9", "Adam first-moment decay"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam epsilon"),
    ("loss_window", "50", "trailing steps averaged into the final loss"),
    // synthetic data
    ("d", "32", "token dimension"),
    ("vocab_size", "512", "synthetic vocabulary size"),
    ("query_tokens", "8", "tokens per query"),
    ("doc_tokens", "24", "tokens per document"),
    ("n_way", "16", "candidates per tuple"),
    ("tuple_count", "2000", "training tuples"),
    ("planted_rank", "4", "clusters and rank of the planted metric"),
    ("sharpness", "2", "teacher score scale"),
    ("noise_sigma", "0.1", "teacher score noise"),
    ("context_sigma", "0.5", "token occurrence noise seen by the student"),
    ("data_seed", "0", "generator seed"),
    ("eval_queries", "50", "held-out queries"),
    ("eval_docs_per_query", "9", "held-out documents per query"),
    // evaluation
    ("top_k", "100", "documents retrieved per query"),
    ("ndcg_k", "10", "NDCG cutoff"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Cli,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Cli => "cli",
        })
    }
}

pub fn is_key(name: &str) -> bool {
    SCHEMA.iter().any(|(k, _, _)| *k == name)
}

/// Resolved configuration with per-key provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<&'static str, (String, Source)>,
    file: BTreeMap<String, String>,
    cli: BTreeMap<String, String>,
}

fn canonical_key(name: &str) -> Option<&'static str> {
    SCHEMA.iter().map(|(k, _, _)| *k).find(|k| *k == name)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim().replace('-', "_"), v.trim().to_string());
        if !is_key(&k) {
            return Err(Error::config(format!("line {}: unknown key '{k}'", i + 1)));
        }
        if out.insert(k.clone(), v).is_some() {
            return Err(Error::config(format!("line {}: duplicate key '{k}'", i + 1)));
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn defaults() -> Self {
        Self::layered(BTreeMap::new(), BTreeMap::new()).expect("defaults are valid")
    }

    /// Defaults, then `file`, then `cli`.
    pub fn layered(file: BTreeMap<String, String>, cli: BTreeMap<String, String>) -> Result<Self> {
        let mut values: BTreeMap<&'static str, (String, Source)> =
            SCHEMA.iter().map(|(k, v, _)| (*k, (v.to_string(), Source::Default))).collect();
        for (layer, source) in [(&file, Source::File), (&cli, Source::Cli)] {
            for (k, v) in layer {
                let key = canonical_key(k).ok_or_else(|| Error::config(format!("unknown key '{k}'")))?;
                values.insert(key, (v.clone(), source));
            }
        }
        let cfg = Self { values, file, cli };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, cli: BTreeMap<String, String>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_config_text(&text).map_err(|e| match e {
                    Error::Config(m) => Error::config(format!("{}: {m}", p.display())),
                    other => other,
                })?
            }
            None => BTreeMap::new(),
        };
        Self::layered(file, cli)
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values.get(key).unwrap_or_else(|| panic!("schema key {key}")).0
    }

    pub fn source(&self, key: &str) -> Source {
        self.values[key].1
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse::<T>()
            .map_err(|e| Error::config(format!("{key}: cannot parse '{raw}': {e}")))
    }

    /// Parses every key once so that bad values fail before any work starts.
    fn check(&self) -> Result<()> {
        self.head_config(1)?;
        let t = self.train_config()?;
        t.validate()?;
        self.synth_config()?.validate()?;
        self.get::<usize>("loss_window")?;
        if self.get::<usize>("top_k")? == 0 || self.get::<usize>("ndcg_k")? == 0 {
            return Err(Error::config("top_k and ndcg_k must be positive"));
        }
        Ok(())
    }

    /// Head description for inputs of width `input_dim`.
    pub fn head_config(&self, input_dim: usize) -> Result<HeadConfig> {
        let depth: usize = self.get("depth")?;
        let bias = match self.raw("bias") {
            "auto" => depth > 1,
            _ => self.get::<bool>("bias")?,
        };
        Ok(HeadConfig {
            input_dim,
            output_dim: self.get("output_dim")?,
            depth,
            family: self.get::<Family>("family")?,
            activation: self.get::<Activation>("activation")?,
            gate: self.get::<Activation>("gate")?,
            rho: self.get("rho")?,
            residual: self.get("residual")?,
            bias,
            alpha_init: self.get("alpha_init")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.get("batch_size")?,
            peak_lr: self.get("peak_lr")?,
            warmup_fraction: self.get("warmup_fraction")?,
            total_steps: self.get("total_steps")?,
            weight_decay: self.get("weight_decay")?,
            seed: self.get("seed")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("adam_eps")?,
        })
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            d: self.get("d")?,
            vocab_size: self.get("vocab_size")?,
            query_tokens: self.get("query_tokens")?,
            doc_tokens: self.get("doc_tokens")?,
            n_way: self.get("n_way")?,
            tuple_count: self.get("tuple_count")?,
            planted_rank: self.get("planted_rank")?,
            sharpness: self.get("sharpness")?,
            noise_sigma: self.get("noise_sigma")?,
            seed: self.get("data_seed")?,
            context_sigma: self.get("context_sigma")?,
            eval_queries: self.get("eval_queries")?,
            eval_docs_per_query: self.get("eval_docs_per_query")?,
        })
    }

    /// Flat provenance: `config.<key>`, `source.<key>`, plus the raw
    /// `file.<key>` and `cli.<key>` layers where present.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        for (k, (v, s)) in &self.values {
            m.insert(format!("config.{k}"), v.clone());
            m.insert(format!("source.{k}"), s.to_string());
        }
        for (k, v) in &self.file {
            m.insert(format!("file.{k}"), v.clone());
        }
        for (k, v) in &self.cli {
            m.insert(format!("cli.{k}"), v.clone());
        }
        m.insert("tool_version".into(), crate::VERSION.into());
        m
    }

    pub fn to_json(&self) -> Value {
        let resolved: BTreeMap<_, _> = self.values.iter().map(|(k, (v, _))| (*k, v.clone())).collect();
        let sources: BTreeMap<_, _> = self.values.iter().map(|(k, (_, s))| (*k, s.to_string())).collect();
        let defaults: BTreeMap<_, _> = SCHEMA.iter().map(|(k, v, _)| (*k, *v)).collect();
        json!({
            "tool_version": crate::VERSION,
            "resolved": resolved,
            "source": sources,
            "defaults": defaults,
            "file": self.file,
            "cli": self.cli,
        })
    }
}
