//! The `latelab` command line.
//!
//! ```text
//! latelab gen-data --config exp.cfg --out data/tuples.jsonl
//! latelab train    --config exp.cfg --data data/tuples.jsonl --seed 42 --out heads/ffn.head
//! latelab search   --head heads/ffn.head --queries data/tuples.queries.jsonl \
//!                  --corpus data/tuples.corpus.jsonl --out runs/ffn.run
//! latelab evaluate --run runs/ffn.run --qrels data/tuples.qrels --out ffn.metrics.json
//! latelab diagnose --head heads/ffn.head --data data/tuples.jsonl --out ffn.diag.json
//! latelab sweep    --config exp.cfg --seeds 1,42,1337 --out results/
//! ```
//!
//! Any schema key from [`config::SCHEMA`] may be given as `--key value`
//! (or `--key=value`, dashes and underscores interchangeable) on any
//! subcommand. Failures print one `latelab: error[<kind>]: <message>` line
//! to stderr; usage and configuration problems exit with 2, everything
//! else with 1.

mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;
pub use config::{ExperimentConfig, Source, SCHEMA};

/// Thread cap for the rayon pool; results do not depend on it.
pub const THREADS_ENV: &str = "LATELAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "latelab", version, about = "Late-interaction projection-head lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic distillation set and its held-out retrieval split.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Tuples file; queries, corpus and qrels are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a head from teacher scores.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Head file; the loss trace goes to the same stem with `.trace.tsv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact MaxSim search of queries against a corpus, written as a TREC run.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "latelab")]
        tag: String,
    },
    /// NDCG of a run against qrels, optionally paired against a second run.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        baseline_run: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Algebraic checks on a trained head.
    Diagnose {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        head: PathBuf,
        /// Tuples file supplying one tuple for the gradient audit.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        tuple_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured head and the linear baseline over several seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Tuples file from `gen-data`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Splits schema-key overrides out of `args`, leaving the rest for clap.
fn extract_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, BTreeMap<String, String>), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = BTreeMap::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.replace('-', "_"), Some(v.to_string())),
            None => (flag.replace('-', "_"), None),
        };
        if !config::is_key(&name) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => iter
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| format!("--{name} needs a value"))?,
        };
        if overrides.insert(name.clone(), value).is_some() {
            return Err(format!("--{name} given twice"));
        }
    }
    Ok((rest, overrides))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fail(kind: &str, message: &str) {
    eprintln!("latelab: error[{kind}]: {}", one_line(message));
}

fn set_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got '{raw}'"))?;
    // a pool may already exist when called as a library; that is fine
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one command line (including the program name) and returns the exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let (rest, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(m) => {
            fail("usage", &m);
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid usage");
            fail("usage", first.trim_start_matches("error: "));
            return 2;
        }
    };
    if let Err(m) = set_threads() {
        fail("usage", &m);
        return 2;
    }
    match commands::run(cli.command, overrides) {
        Ok(()) => 0,
        Err(e) => {
            fail(e.kind(), &e.to_string());
            if matches!(e, Error::Config(_)) {
                2
            } else {
                1
            }
        }
    }
}
