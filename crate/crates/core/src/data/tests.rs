use super::*;
use crate::autodiff::Matrix;
use crate::error::Error;
use crate::eval::Corpus;
use crate::train::TrainingTuple;
use proptest::prelude::*;

fn small() -> SynthConfig {
    SynthConfig {
        d: 8,
        vocab_size: 64,
        query_tokens: 3,
        doc_tokens: 6,
        n_way: 4,
        tuple_count: 20,
        planted_rank: 2,
        eval_queries: 4,
        eval_docs_per_query: 3,
        seed: 7,
        ..SynthConfig::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_synthetic(&small()).unwrap();
    let b = generate_synthetic(&small()).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&SynthConfig { seed: 8, ..small() }).unwrap();
    assert_ne!(a.tuples, c.tuples);

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_tuples(&p1, &a.tuples, None).unwrap();
    write_tuples(&p2, &b.tuples, None).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn shapes_and_held_out_set() {
    let cfg = small();
    let ds = generate_synthetic(&cfg).unwrap();
    assert_eq!(ds.tuples.len(), 20);
    for t in &ds.tuples {
        assert_eq!(t.query.shape(), (3, 8));
        assert_eq!(t.docs.len(), 4);
        assert!(t.docs.iter().all(|d| d.shape() == (6, 8)));
    }
    assert_eq!(ds.queries.len(), 4);
    assert_eq!(ds.corpus.len(), 16);
    for (qid, _) in &ds.queries {
        let judged = ds.qrels.query(qid).unwrap();
        assert_eq!(judged.len(), 4);
        assert_eq!(judged[&format!("d{}_0", &qid[1..])], 2);
    }
}

#[test]
fn noiseless_teacher_ranks_the_positive_first() {
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        tuple_count: 200,
        ..small()
    };
    for t in generate_synthetic(&cfg).unwrap().tuples {
        let s = &t.teacher_scores;
        assert!(s[1..].iter().all(|&x| x < s[0]), "{s:?}");
        assert!((s[0] - cfg.sharpness * cfg.query_tokens as f64).abs() < 1e-9);
    }
}

#[test]
fn infeasible_configs_are_rejected() {
    for bad in [
        SynthConfig { planted_rank: 8, ..small() },
        SynthConfig { vocab_size: 6, ..small() },
        SynthConfig { n_way: 1, ..small() },
        SynthConfig { doc_tokens: 2, ..small() },
        SynthConfig { query_tokens: 33, ..small() },
        SynthConfig { sharpness: 0.0, ..small() },
    ] {
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn tuple_file_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.jsonl");
    std::fs::write(
        &p,
        "{\"query\":[[1,0]],\"docs\":[[[1,0]],[[0,1]]],\"teacher_scores\":[1,0]}\n{\"query\":[[1,0]],\"docs\":[[[1,0]],[[0,1]]]}\n",
    )
    .unwrap();
    match load_tuples(&p) {
        Err(Error::Parse { line: 2, message }) => assert!(message.contains("teacher_scores"), "{message}"),
        other => panic!("{other:?}"),
    }

    std::fs::write(
        &p,
        "{\"query\":[[1,0]],\"docs\":[[[1,0]],[[0,1]]],\"teacher_scores\":[1,0]}\n\n{\"query\":[[1,0,0]],\"docs\":[[[1,0,0]],[[0,1,0]]],\"teacher_scores\":[1,0]}\n",
    )
    .unwrap();
    let first_len = std::fs::read_to_string(&p).unwrap().find("\n\n").unwrap() + 2;
    match load_tuples(&p) {
        Err(Error::Format { offset, message }) => {
            assert_eq!(offset, first_len);
            assert!(message.contains("line 3"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn tuple_meta_line_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.jsonl");
    let ds = generate_synthetic(&small()).unwrap();
    let meta = serde_json::json!({"synthetic": true, "seed": 7});
    write_tuples(&p, &ds.tuples, Some(&meta)).unwrap();
    let back = load_tuples(&p).unwrap();
    assert_eq!(back.value, ds.tuples);
    assert_eq!(back.meta, Some(meta));
}

#[test]
fn corpus_caps_duplicates_and_empties() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    let mut corpus = Corpus::new();
    corpus.insert("long", Matrix::from_fn(400, 2, |r, c| (r * 2 + c) as f64)).unwrap();
    corpus.insert("short", Matrix::filled(3, 2, 0.5)).unwrap();
    write_corpus(&p, &corpus, None).unwrap();
    let loaded = load_corpus(&p).unwrap();
    assert_eq!(loaded.truncated, 1);
    assert_eq!(loaded.value.get("long").unwrap().rows(), 300);
    assert_eq!(loaded.value.get("short"), corpus.get("short"));
    assert!(loaded.warnings.iter().any(|w| w.contains("truncated")));

    let queries = std::collections::BTreeMap::from([("q".to_string(), Matrix::filled(40, 2, 1.0))]);
    write_queries(&p, &queries, None).unwrap();
    assert_eq!(load_queries(&p).unwrap().value["q"].rows(), 32);

    std::fs::write(&p, "").unwrap();
    let empty = load_corpus(&p).unwrap();
    assert!(empty.value.is_empty() && !empty.warnings.is_empty());

    std::fs::write(&p, "{\"id\":\"a\",\"tokens\":[[1]]}\n{\"id\":\"a\",\"tokens\":[[2]]}\n").unwrap();
    assert!(matches!(load_corpus(&p), Err(Error::Format { .. })));
}

#[test]
fn corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    let ds = generate_synthetic(&small()).unwrap();
    write_corpus(&p, &ds.corpus, None).unwrap();
    assert_eq!(load_corpus(&p).unwrap().value, ds.corpus);
    write_queries(&p, &ds.queries, None).unwrap();
    assert_eq!(load_queries(&p).unwrap().value, ds.queries);
}

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

proptest! {
    #[test]
    fn tuple_round_trip_is_bit_exact(values in prop::collection::vec(finite(), 12), scores in prop::collection::vec(finite(), 2)) {
        let q = Matrix::from_vec(2, 2, values[..4].to_vec()).unwrap();
        let d1 = Matrix::from_vec(2, 2, values[4..8].to_vec()).unwrap();
        let d2 = Matrix::from_vec(2, 2, values[8..].to_vec()).unwrap();
        let t = TrainingTuple::new(q, vec![d1, d2], scores).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        write_tuples(&p, std::slice::from_ref(&t), None).unwrap();
        let back = load_tuples(&p).unwrap().value;
        let bits = |t: &TrainingTuple| -> Vec<u64> {
            t.query.values().iter().chain(t.docs.iter().flat_map(|d| d.values())).chain(&t.teacher_scores).map(|v| v.to_bits()).collect()
        };
        prop_assert_eq!(bits(&back[0]), bits(&t));
    }
}
