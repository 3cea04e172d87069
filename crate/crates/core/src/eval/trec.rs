use std::fmt::Write as _;
use std::path::Path;

use super::{Qrels, RunEntry};
use crate::error::{Error, Result};

/// Reads whitespace-separated `qid 0 docid rel` lines.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 'qid 0 docid rel', got {} fields", fields.len())));
        }
        let rel: i64 = fields[3].parse().map_err(|e| parse_err(format!("relevance: {e}")))?;
        // negative grades appear in some collections; they carry no gain
        let rel = rel.max(0) as u32;
        qrels
            .insert(fields[0], fields[2], rel)
            .map_err(|e| parse_err(e.to_string()))?;
    }
    Ok(qrels)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut out = String::new();
    for (qid, docs) in qrels.iter() {
        for (docid, rel) in docs {
            let _ = writeln!(out, "{qid} 0 {docid} {rel}");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `qid Q0 docid rank score tag`, ranks from 1, scores with 6 decimals.
pub fn render_run(run: &[RunEntry], tag: &str) -> String {
    let mut out = String::new();
    for entry in run {
        for (rank, (docid, score)) in entry.ranked.iter().enumerate() {
            let _ = writeln!(out, "{} Q0 {docid} {} {score:.6} {tag}", entry.qid, rank + 1);
        }
    }
    out
}

pub fn write_run(path: &Path, run: &[RunEntry], tag: &str) -> Result<()> {
    std::fs::write(path, render_run(run, tag)).map_err(|e| Error::io(path, e))
}

/// Reads a TREC run, grouping lines by query in first-seen order and ranks ascending.
pub fn read_run(path: &Path) -> Result<Vec<RunEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut run: Vec<RunEntry> = Vec::new();
    let mut ranks: Vec<Vec<usize>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 6 {
            return Err(parse_err(format!(
                "expected 'qid Q0 docid rank score tag', got {} fields",
                fields.len()
            )));
        }
        let rank: usize = fields[3].parse().map_err(|e| parse_err(format!("rank: {e}")))?;
        let score: f64 = fields[4].parse().map_err(|e| parse_err(format!("score: {e}")))?;
        let pos = match run.iter().position(|e| e.qid == fields[0]) {
            Some(p) => p,
            None => {
                run.push(RunEntry {
                    qid: fields[0].to_string(),
                    ranked: Vec::new(),
                });
                ranks.push(Vec::new());
                run.len() - 1
            }
        };
        run[pos].ranked.push((fields[2].to_string(), score));
        ranks[pos].push(rank);
    }
    for (entry, r) in run.iter_mut().zip(ranks) {
        let mut paired: Vec<(usize, (String, f64))> = r.into_iter().zip(entry.ranked.drain(..)).collect();
        paired.sort_by_key(|(rank, _)| *rank);
        entry.ranked = paired.into_iter().map(|(_, p)| p).collect();
    }
    Ok(run)
}
