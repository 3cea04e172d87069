use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latelab::heads::read_head;
use serde_json::Value;

const SMALL: &str = "\
# tiny experiment
tuple_count = 48
n_way = 4
d = 8
vocab_size = 64
doc_tokens = 10
output_dim = 4
eval_queries = 6
batch_size = 8
total_steps = 12
";

struct Lab {
    dir: tempfile::TempDir,
}

impl Lab {
    fn new(cfg: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("exp.cfg"), cfg).unwrap();
        Lab { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_latelab"));
        cmd.args(args).current_dir(self.dir.path());
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn bytes(&self, p: &str) -> Vec<u8> {
        std::fs::read(self.path(p)).unwrap()
    }

    fn json(&self, p: &str) -> Value {
        serde_json::from_slice(&self.bytes(p)).unwrap()
    }

    fn gen(&self) {
        self.ok(&["gen-data", "--config", "exp.cfg", "--out", "data/t.jsonl"]);
    }
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(text.lines().count(), 1, "{text}");
    text
}

#[test]
fn full_pipeline() {
    let lab = Lab::new(SMALL);
    let summary = lab.ok(&["gen-data", "--config", "exp.cfg", "--out", "data/t.jsonl"]);
    assert!(summary.contains("48 tuples"), "{summary}");
    for f in ["t.jsonl", "t.queries.jsonl", "t.corpus.jsonl", "t.qrels", "t.meta.json"] {
        assert!(lab.path("data").join(f).exists(), "{f}");
    }
    let first = String::from_utf8(lab.bytes("data/t.jsonl")).unwrap();
    assert!(first.starts_with("{\"_meta\""));

    lab.ok(&["train", "--config", "exp.cfg", "--data", "data/t.jsonl", "--out", "heads/h.head"]);
    let head = read_head(&lab.path("heads/h.head"), None).unwrap();
    assert_eq!(head.config.input_dim, 8);
    assert_eq!(head.metadata["tool_version"], latelab::VERSION);
    assert_eq!(head.metadata["steps"], "12");
    let trace = String::from_utf8(lab.bytes("heads/h.trace.tsv")).unwrap();
    assert!(trace.contains("# config.total_steps=12"));
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 12);

    lab.ok(&[
        "search", "--head", "heads/h.head", "--queries", "data/t.queries.jsonl", "--corpus",
        "data/t.corpus.jsonl", "--out", "runs/h.run", "--top-k", "5",
    ]);
    let run = String::from_utf8(lab.bytes("runs/h.run")).unwrap();
    assert_eq!(run.lines().count(), 6 * 5);
    assert!(lab.path("runs/h.run.meta.json").exists());

    let line = lab.ok(&[
        "evaluate", "--run", "runs/h.run", "--qrels", "data/t.qrels", "--out", "m.json", "--baseline-run", "runs/h.run",
    ]);
    assert!(line.starts_with("evaluate: ndcg@10"), "{line}");
    let m = lab.json("m.json");
    let mean = m["ndcg"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
    assert_eq!(m["baseline"]["paired_t_test"]["p"].as_f64(), Some(1.0));

    lab.ok(&["diagnose", "--head", "heads/h.head", "--data", "data/t.jsonl", "--out", "diag.json"]);
    let diag = lab.json("diag.json");
    assert!(diag["tolerances"].is_object());
    assert!(diag["checks"].as_array().unwrap().iter().all(|c| c["pass"] == Value::Bool(true)));
}

#[test]
fn outputs_are_reproducible_and_inputs_untouched() {
    let lab = Lab::new(SMALL);
    lab.gen();
    let data_before = lab.bytes("data/t.jsonl");
    for out in ["a", "b"] {
        lab.ok(&[
            "train", "--config", "exp.cfg", "--data", "data/t.jsonl", "--seed", "42", "--depth", "2", "--rho", "2",
            "--residual", "true", "--out", &format!("{out}.head"),
        ]);
    }
    assert_eq!(lab.bytes("a.head"), lab.bytes("b.head"));
    assert_eq!(lab.bytes("a.trace.tsv"), lab.bytes("b.trace.tsv"));
    assert_eq!(lab.bytes("data/t.jsonl"), data_before);

    // the thread cap does not change results
    let out = lab.run_env(
        &[
            "train", "--config", "exp.cfg", "--data", "data/t.jsonl", "--seed", "42", "--depth", "2", "--rho", "2",
            "--residual", "true", "--out", "c.head",
        ],
        &[("LATELAB_THREADS", "1")],
    );
    assert!(out.status.success());
    assert_eq!(lab.bytes("a.head"), lab.bytes("c.head"));

    lab.ok(&["gen-data", "--config", "exp.cfg", "--out", "again/t.jsonl"]);
    for f in ["t.jsonl", "t.queries.jsonl", "t.corpus.jsonl", "t.qrels"] {
        assert_eq!(lab.bytes(&format!("data/{f}")), lab.bytes(&format!("again/{f}")), "{f}");
    }
    lab.ok(&["gen-data", "--config", "exp.cfg", "--data-seed", "9", "--out", "other/t.jsonl"]);
    assert_ne!(lab.bytes("data/t.jsonl"), lab.bytes("other/t.jsonl"));
}

#[test]
fn precedence_is_recorded() {
    let lab = Lab::new(&format!("{SMALL}seed = 5\nrho = 2\n"));
    lab.gen();
    lab.ok(&["train", "--config", "exp.cfg", "--data", "data/t.jsonl", "--seed=7", "--out", "h.head"]);
    let meta = read_head(&lab.path("h.head"), None).unwrap().metadata;
    assert_eq!(meta["config.seed"], "7");
    assert_eq!(meta["source.seed"], "cli");
    assert_eq!(meta["file.seed"], "5");
    assert_eq!(meta["cli.seed"], "7");
    assert_eq!(meta["source.rho"], "file");
    assert_eq!(meta["source.family"], "default");
}

#[test]
fn usage_errors_exit_two_with_one_line() {
    let lab = Lab::new("bogus_key = 1\n");
    for args in [
        vec!["frobnicate"],
        vec!["train", "--data", "x", "--out", "y", "--no-such-flag"],
        vec!["gen-data", "--config", "exp.cfg", "--out", "t.jsonl"],
        vec!["gen-data", "--out", "t.jsonl", "--depth", "deep"],
        vec!["sweep", "--out", "r", "--seeds", "1,1"],
    ] {
        let out = lab.run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(stderr_line(&out).starts_with("latelab: error["), "{args:?}");
    }
    assert!(!lab.path("t.jsonl").exists());
    let out = lab.run_env(&["gen-data", "--out", "t.jsonl"], &[("LATELAB_THREADS", "many")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let lab = Lab::new(SMALL);
    let out = lab.run(&["train", "--data", "missing.jsonl", "--out", "h.head"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("latelab: error[io]"));

    std::fs::write(lab.path("broken.jsonl"), "{\"query\": [[1.0]]}\n").unwrap();
    let out = lab.run(&["train", "--data", "broken.jsonl", "--out", "h.head"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("latelab: error[parse]"));
    assert!(!lab.path("h.head").exists());
}

fn sweep_report(lab: &Lab, seeds: &str, extra: &[&str]) -> Value {
    let mut args = vec!["sweep", "--config", "exp.cfg", "--data", "data/t.jsonl", "--seeds", seeds, "--out", "res"];
    args.extend_from_slice(extra);
    lab.ok(&args);
    lab.json("res/report.json")
}

#[test]
fn sweep_outputs() {
    let lab = Lab::new(SMALL);
    lab.gen();
    let report = sweep_report(&lab, "3,1", &["--depth", "2", "--rho", "2", "--residual", "true"]);
    let seeds: Vec<u64> = report["per_seed"].as_array().unwrap().iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![1, 3]);
    let ndcg = &report["summary"]["ndcg"];
    assert!(ndcg["delta"].is_number());
    assert!(ndcg["paired_t_test"]["p"].is_number());
    assert_eq!(lab.json("res/failures.json"), Value::Array(vec![]));
    for f in ["variant.head", "baseline.head", "variant.trace.tsv", "variant.run", "metrics.json"] {
        assert!(Path::new(&lab.path("res/seed_3").join(f)).exists(), "{f}");
    }
}

#[test]
fn sweep_degenerate_cases() {
    let lab = Lab::new(SMALL);
    lab.gen();
    let one = sweep_report(&lab, "4", &[]);
    assert_eq!(one["summary"]["ndcg"]["paired_t_test"], "insufficient seeds");

    // the default head is the linear baseline itself
    let same = sweep_report(&lab, "1,2,3", &[]);
    assert_eq!(same["summary"]["ndcg"]["delta"].as_f64(), Some(0.0));
    assert_eq!(same["summary"]["ndcg"]["paired_t_test"]["p"].as_f64(), Some(1.0));
}
