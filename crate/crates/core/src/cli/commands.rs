use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::Command;
use crate::autodiff::Matrix;
use crate::data::{generate_synthetic, load_corpus, load_queries, load_tuples, write_corpus, write_queries, write_tuples, Loaded};
use crate::diagnostics::run_diagnostics;
use crate::error::{Error, Result};
use crate::eval::{exact_search, ndcg_at_k, paired_t_test, read_qrels, read_run, write_qrels, write_run, Corpus, Qrels};
use crate::heads::{read_head, write_head, HeadConfig, HeadParams};
use crate::sweep::{run_seed, seed_row, summarize, ArmResult, SeedResult, SweepData, SweepSettings};
use crate::train::{head_checksum, train_head, write_trace, LossTrace, TrainingTuple};

pub(super) fn run(command: Command, overrides: BTreeMap<String, String>) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&load(config, overrides)?, &out),
        Command::Train { config, data, out } => train(&load(config, overrides)?, &data, &out),
        Command::Search {
            config,
            head,
            queries,
            corpus,
            out,
            tag,
        } => search(&load(config, overrides)?, &head, &queries, &corpus, &out, &tag),
        Command::Evaluate {
            config,
            run,
            qrels,
            baseline_run,
            out,
        } => evaluate(&load(config, overrides)?, &run, &qrels, baseline_run.as_deref(), out.as_deref()),
        Command::Diagnose {
            config,
            head,
            data,
            tuple_index,
            out,
        } => diagnose(&load(config, overrides)?, &head, data.as_deref(), tuple_index, &out),
        Command::Sweep {
            config,
            seeds,
            data,
            out,
        } => sweep(&load(config, overrides)?, seeds, data.as_deref(), &out),
    }
}

fn load(path: Option<PathBuf>, overrides: BTreeMap<String, String>) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path.as_deref(), overrides)
}

/// Sibling files of a tuples file: `<stem>.queries.jsonl`, `<stem>.corpus.jsonl`, `<stem>.qrels`, `<stem>.meta.json`.
pub(crate) fn siblings(tuples: &Path) -> [PathBuf; 4] {
    ["queries.jsonl", "corpus.jsonl", "qrels", "meta.json"].map(|ext| tuples.with_extension(ext))
}

/// Sidecar for formats without room for a header (TREC runs and qrels).
fn meta_sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e)),
        None => Ok(()),
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn warn<T>(what: &Path, loaded: &Loaded<T>) {
    for w in &loaded.warnings {
        eprintln!("latelab: warning: {}: {w}", what.display());
    }
    if loaded.truncated > 0 {
        eprintln!("latelab: warning: {}: {} records truncated at the token cap", what.display(), loaded.truncated);
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let synth = cfg.synth_config()?;
    let ds = generate_synthetic(&synth)?;
    let meta = json!({"kind": "synthetic", "config": cfg.to_json()});
    let [queries, corpus, qrels, manifest] = siblings(out);
    write_tuples(out, &ds.tuples, Some(&meta))?;
    write_queries(&queries, &ds.queries, Some(&meta))?;
    write_corpus(&corpus, &ds.corpus, Some(&meta))?;
    write_qrels(&qrels, &ds.qrels)?;
    write_json(
        &manifest,
        &json!({
            "config": cfg.to_json(),
            "tuples": out, "queries": queries, "corpus": corpus, "qrels": qrels,
            "sha256": {
                "tuples": file_sha256(out)?,
                "queries": file_sha256(&queries)?,
                "corpus": file_sha256(&corpus)?,
                "qrels": file_sha256(&qrels)?,
            },
        }),
    )?;
    println!(
        "gen-data: {} tuples ({}-way, d={}), {} held-out queries over {} documents -> {}",
        ds.tuples.len(),
        synth.n_way,
        synth.d,
        ds.queries.len(),
        ds.corpus.len(),
        out.display()
    );
    Ok(())
}

fn load_train_tuples(path: &Path) -> Result<Vec<TrainingTuple>> {
    let loaded = load_tuples(path)?;
    warn(path, &loaded);
    if loaded.value.is_empty() {
        return Err(Error::contract(format!("{} holds no tuples", path.display())));
    }
    Ok(loaded.value)
}

/// Provenance shared by every file a training run writes.
fn train_metadata(cfg: &ExperimentConfig, data_sha: &str, head: &HeadParams, trace: &LossTrace, window: usize) -> BTreeMap<String, String> {
    let mut meta = cfg.metadata();
    meta.insert("data_sha256".into(), data_sha.to_string());
    meta.insert("steps".into(), trace.len().to_string());
    meta.insert("final_loss".into(), format!("{:e}", trace.tail_mean(window)));
    meta.insert("config_hash".into(), head.config.config_hash());
    meta
}

fn save_trained(path: &Path, mut head: HeadParams, trace: &LossTrace, meta: BTreeMap<String, String>) -> Result<PathBuf> {
    ensure_parent(path)?;
    let trace_path = path.with_extension("trace.tsv");
    write_trace(&trace_path, trace, &meta)?;
    head.metadata = meta;
    head.metadata.insert("checksum".into(), trace.checksum.clone());
    write_head(path, &head)?;
    Ok(trace_path)
}

fn train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let tuples = load_train_tuples(data)?;
    let head_cfg = cfg.head_config(tuples[0].dim())?;
    let train_cfg = cfg.train_config()?;
    let window: usize = cfg.get("loss_window")?;
    let (head, trace) = train_head(&head_cfg, &train_cfg, &tuples)?;
    let meta = train_metadata(cfg, &file_sha256(data)?, &head, &trace, window);
    let trace_path = save_trained(out, head, &trace, meta)?;
    println!(
        "train: {} steps, final loss {:.6e} (mean of last {}), head {}, trace {}",
        trace.len(),
        trace.tail_mean(window),
        window.min(trace.len()),
        out.display(),
        trace_path.display()
    );
    Ok(())
}

fn search(cfg: &ExperimentConfig, head: &Path, queries: &Path, corpus: &Path, out: &Path, tag: &str) -> Result<()> {
    let params = read_head(head, None)?;
    let q = load_queries(queries)?;
    warn(queries, &q);
    let c = load_corpus(corpus)?;
    warn(corpus, &c);
    let top_k: usize = cfg.get("top_k")?;
    let run = exact_search(&q.value, &c.value, &params, top_k)?;
    ensure_parent(out)?;
    write_run(out, &run, tag)?;
    write_json(
        &meta_sidecar(out),
        &json!({
            "config": cfg.to_json(),
            "head_sha256": file_sha256(head)?,
            "head_checksum": head_checksum(&params),
            "queries_sha256": file_sha256(queries)?,
            "corpus_sha256": file_sha256(corpus)?,
            "tag": tag,
        }),
    )?;
    println!(
        "search: {} queries x {} documents, top {} -> {}",
        q.value.len(),
        c.value.len(),
        top_k,
        out.display()
    );
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, run: &Path, qrels: &Path, baseline: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let k: usize = cfg.get("ndcg_k")?;
    let judgments = read_qrels(qrels)?;
    let report = ndcg_at_k(&read_run(run)?, &judgments, k)?;
    let mut doc = json!({
        "config": cfg.to_json(),
        "run_sha256": file_sha256(run)?,
        "qrels_sha256": file_sha256(qrels)?,
        "gain": "2^rel - 1",
        "ndcg": report.to_json(),
    });
    let mut line = match report.mean {
        Some(m) => format!("evaluate: ndcg@{k} = {m:.4} over {} queries", report.per_query.len()),
        None => format!("evaluate: ndcg@{k} undefined, no judged queries"),
    };
    if let Some(b) = baseline {
        let base = ndcg_at_k(&read_run(b)?, &judgments, k)?;
        let shared: Vec<&String> = report.per_query.keys().filter(|q| base.per_query.contains_key(*q)).collect();
        let a: Vec<f64> = shared.iter().map(|q| report.per_query[*q]).collect();
        let bv: Vec<f64> = shared.iter().map(|q| base.per_query[*q]).collect();
        let test = if shared.len() >= 2 {
            let t = paired_t_test(&a, &bv)?;
            line.push_str(&format!(", paired vs baseline over {} queries: p = {}", t.n, t.p));
            t.to_json()
        } else {
            json!("insufficient queries")
        };
        doc["baseline"] = json!({"run_sha256": file_sha256(b)?, "ndcg": base.to_json(), "paired_t_test": test});
    }
    if let Some(o) = out {
        write_json(o, &doc)?;
    }
    println!("{line}");
    Ok(())
}

fn diagnose(cfg: &ExperimentConfig, head: &Path, data: Option<&Path>, index: usize, out: &Path) -> Result<()> {
    let params = read_head(head, None)?;
    let tuple = match data {
        Some(p) => {
            let tuples = load_train_tuples(p)?;
            let n = tuples.len();
            Some(tuples.into_iter().nth(index).ok_or_else(|| {
                Error::contract(format!("tuple index {index} out of range for {n} tuples"))
            })?)
        }
        None => None,
    };
    let report = run_diagnostics(&params, tuple.as_ref(), cfg.get("seed")?)?;
    let mut doc = report.to_json();
    doc["config"] = cfg.to_json();
    doc["head_sha256"] = json!(file_sha256(head)?);
    write_json(out, &doc)?;
    let passed = report.checks.iter().filter(|c| c.pass).count();
    println!(
        "diagnose: {passed}/{} checks pass, {} not applicable -> {}",
        report.checks.len(),
        report.not_applicable.len(),
        out.display()
    );
    Ok(())
}

struct HeldOut {
    tuples: Vec<TrainingTuple>,
    queries: BTreeMap<String, Matrix>,
    corpus: Corpus,
    qrels: Qrels,
    source: Value,
}

fn sweep_data(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<HeldOut> {
    match data {
        None => {
            let ds = generate_synthetic(&cfg.synth_config()?)?;
            Ok(HeldOut {
                tuples: ds.tuples,
                queries: ds.queries,
                corpus: ds.corpus,
                qrels: ds.qrels,
                source: json!({"generated": true}),
            })
        }
        Some(p) => {
            let [queries, corpus, qrels, _] = siblings(p);
            let q = load_queries(&queries)?;
            warn(&queries, &q);
            let c = load_corpus(&corpus)?;
            warn(&corpus, &c);
            Ok(HeldOut {
                tuples: load_train_tuples(p)?,
                queries: q.value,
                corpus: c.value,
                qrels: read_qrels(&qrels)?,
                source: json!({"generated": false, "tuples_sha256": file_sha256(p)?}),
            })
        }
    }
}

fn write_arm(dir: &Path, name: &str, arm: &ArmResult, cfg: &ExperimentConfig, data_sha: &str, window: usize) -> Result<()> {
    let mut meta = train_metadata(cfg, data_sha, &arm.params, &arm.trace, window);
    meta.insert("arm".into(), name.into());
    save_trained(&dir.join(format!("{name}.head")), arm.params.clone(), &arm.trace, meta)?;
    write_run(&dir.join(format!("{name}.run")), &arm.run, name)
}

fn sweep(cfg: &ExperimentConfig, mut seeds: Vec<u64>, data: Option<&Path>, out: &Path) -> Result<()> {
    seeds.sort_unstable();
    if seeds.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("--seeds contains duplicates"));
    }
    let held = sweep_data(cfg, data)?;
    let d = held.tuples[0].dim();
    let variant = cfg.head_config(d)?;
    let settings = SweepSettings {
        baseline: HeadConfig::linear(d, variant.output_dim),
        variant,
        train: cfg.train_config()?,
        seeds: seeds.clone(),
        top_k: cfg.get("top_k")?,
        ndcg_k: cfg.get("ndcg_k")?,
        loss_window: cfg.get("loss_window")?,
    };
    let view = SweepData {
        tuples: &held.tuples,
        queries: &held.queries,
        corpus: &held.corpus,
        qrels: &held.qrels,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data_sha = match data {
        Some(p) => file_sha256(p)?,
        None => "generated".to_string(),
    };

    let outcomes: Vec<(u64, Result<SeedResult>)> = seeds
        .par_iter()
        .map(|&s| {
            let r = run_seed(s, view, &settings).and_then(|r| {
                let dir = out.join(format!("seed_{s}"));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_arm(&dir, "variant", &r.variant, cfg, &data_sha, settings.loss_window)?;
                write_arm(&dir, "baseline", &r.baseline, cfg, &data_sha, settings.loss_window)?;
                write_json(
                    &dir.join("metrics.json"),
                    &json!({
                        "row": seed_row(&r),
                        "variant_ndcg": r.variant.ndcg.to_json(),
                        "baseline_ndcg": r.baseline.ndcg.to_json(),
                    }),
                )?;
                Ok(r)
            });
            (s, r)
        })
        .collect();

    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in outcomes {
        match r {
            Ok(r) => done.push(r),
            Err(e) => failures.push(json!({"seed": seed, "kind": e.kind(), "error": e.to_string()})),
        }
    }
    let summary = if done.is_empty() { None } else { Some(summarize(&done)?) };
    write_json(&out.join("failures.json"), &json!(failures))?;
    write_json(
        &out.join("report.json"),
        &json!({
            "config": cfg.to_json(),
            "data": held.source,
            "variant": settings.variant,
            "baseline": settings.baseline,
            "per_seed": done.iter().map(seed_row).collect::<Vec<_>>(),
            "summary": summary.as_ref().map(|s| s.to_json()),
            "failed_seeds": failures.len(),
        }),
    )?;
    if let Some(s) = &summary {
        let p = match &s.ndcg_test {
            Some(t) => format!("p = {}", t.p),
            None => "insufficient seeds".to_string(),
        };
        println!(
            "sweep: {} seeds, ndcg@{} variant {:.4} vs baseline {:.4} (delta {:+.4}, {p}), final loss {:.6e} vs {:.6e}",
            s.seeds.len(),
            settings.ndcg_k,
            s.variant_ndcg.mean,
            s.baseline_ndcg.mean,
            s.ndcg_delta,
            s.variant_loss.mean,
            s.baseline_loss.mean
        );
    }
    if !failures.is_empty() {
        return Err(Error::contract(format!(
            "{} of {} seeds failed; see {}",
            failures.len(),
            seeds.len(),
            out.join("failures.json").display()
        )));
    }
    Ok(())
}
