use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::eval::Corpus;
use crate::train::TrainingTuple;

use super::{DOC_TOKEN_CAP, QUERY_TOKEN_CAP};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TupleRecord {
    query: Vec<Vec<f64>>,
    docs: Vec<Vec<Vec<f64>>>,
    teacher_scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenRecord {
    id: String,
    tokens: Vec<Vec<f64>>,
}

/// A loaded collection plus what happened on the way in.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded<T> {
    pub value: T,
    /// Records whose token list was cut at the cap.
    pub truncated: usize,
    /// Contents of a leading `{"_meta": …}` line, if any.
    pub meta: Option<Value>,
    pub warnings: Vec<String>,
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

fn write_lines<T: Serialize>(path: &Path, meta: Option<&Value>, records: impl Iterator<Item = T>) -> Result<()> {
    let mut out = create(path)?;
    let mut emit = |line: String| out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e));
    if let Some(meta) = meta {
        emit(format!("{}\n", serde_json::json!({ "_meta": meta })))?;
    }
    for r in records {
        emit(format!("{}\n", serde_json::to_string(&r).expect("record serializes")))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn matrix(rows: Vec<Vec<f64>>) -> std::result::Result<Matrix, String> {
    Matrix::from_rows(&rows).map_err(|e| e.to_string())
}

/// Lines of `path` with their 1-based number and byte offset, skipping blanks
/// and splitting off a leading `_meta` record.
fn read_lines(path: &Path) -> Result<(Vec<(usize, usize, String)>, Option<Value>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    let mut meta = None;
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if lines.is_empty() && meta.is_none() && trimmed.starts_with("{\"_meta\"") {
            let v: Value = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            meta = v.get("_meta").cloned();
            continue;
        }
        lines.push((i + 1, start, trimmed.to_string()));
    }
    Ok((lines, meta))
}

/// One JSON object per tuple: `query` (m×d), `docs` (list of n×d), `teacher_scores`.
/// Floats use shortest round-trip formatting, so values come back bit-exact.
pub fn write_tuples(path: &Path, tuples: &[TrainingTuple], meta: Option<&Value>) -> Result<()> {
    write_lines(
        path,
        meta,
        tuples.iter().map(|t| TupleRecord {
            query: t.query.to_rows(),
            docs: t.docs.iter().map(Matrix::to_rows).collect(),
            teacher_scores: t.teacher_scores.clone(),
        }),
    )
}

pub fn load_tuples(path: &Path) -> Result<Loaded<Vec<TrainingTuple>>> {
    let (lines, meta) = read_lines(path)?;
    let mut tuples = Vec::with_capacity(lines.len());
    let mut dim = None;
    for (line, offset, text) in lines {
        let parse_err = |message: String| Error::Parse { line, message };
        let rec: TupleRecord = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        let query = matrix(rec.query).map_err(|m| parse_err(format!("query: {m}")))?;
        let docs = rec
            .docs
            .into_iter()
            .enumerate()
            .map(|(j, d)| matrix(d).map_err(|m| parse_err(format!("docs[{j}]: {m}"))))
            .collect::<Result<Vec<_>>>()?;
        let d = *dim.get_or_insert(query.cols());
        if let Some(bad) = std::iter::once(&query).chain(&docs).find(|m| m.cols() != d) {
            return Err(Error::Format {
                offset,
                message: format!("line {line}: token dim {} differs from {d}", bad.cols()),
            });
        }
        let tuple = TrainingTuple::new(query, docs, rec.teacher_scores).map_err(|e| parse_err(e.to_string()))?;
        tuples.push(tuple);
    }
    let mut warnings = Vec::new();
    if tuples.is_empty() {
        warnings.push(format!("{} holds no tuples", path.display()));
    }
    Ok(Loaded {
        value: tuples,
        truncated: 0,
        meta,
        warnings,
    })
}

fn write_tokens<'a>(path: &Path, items: impl Iterator<Item = (&'a String, &'a Matrix)>, meta: Option<&Value>) -> Result<()> {
    write_lines(
        path,
        meta,
        items.map(|(id, m)| TokenRecord {
            id: id.clone(),
            tokens: m.to_rows(),
        }),
    )
}

fn load_tokens(path: &Path, cap: usize, kind: &str) -> Result<Loaded<BTreeMap<String, Matrix>>> {
    let (lines, meta) = read_lines(path)?;
    let mut out = BTreeMap::new();
    let mut truncated = 0;
    let mut dim = None;
    for (line, offset, text) in lines {
        let rec: TokenRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let mut tokens = rec.tokens;
        if tokens.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("{kind} '{}' has no tokens", rec.id),
            });
        }
        if tokens.len() > cap {
            tokens.truncate(cap);
            truncated += 1;
        }
        let m = matrix(tokens).map_err(|message| Error::Parse { line, message })?;
        let d = *dim.get_or_insert(m.cols());
        if m.cols() != d {
            return Err(Error::Format {
                offset,
                message: format!("line {line}: token dim {} differs from {d}", m.cols()),
            });
        }
        if out.insert(rec.id.clone(), m).is_some() {
            return Err(Error::Format {
                offset,
                message: format!("line {line}: duplicate {kind} id '{}'", rec.id),
            });
        }
    }
    let mut warnings = Vec::new();
    if out.is_empty() {
        warnings.push(format!("{} holds no {kind} records", path.display()));
    }
    if truncated > 0 {
        warnings.push(format!("{truncated} {kind} records truncated to {cap} tokens"));
    }
    Ok(Loaded {
        value: out,
        truncated,
        meta,
        warnings,
    })
}

/// `{"id", "tokens"}` lines; documents longer than the cap are truncated.
pub fn load_corpus(path: &Path) -> Result<Loaded<Corpus>> {
    let loaded = load_tokens(path, DOC_TOKEN_CAP, "document")?;
    let mut corpus = Corpus::new();
    for (id, m) in loaded.value {
        corpus.insert(id, m)?;
    }
    Ok(Loaded {
        value: corpus,
        truncated: loaded.truncated,
        meta: loaded.meta,
        warnings: loaded.warnings,
    })
}

pub fn load_queries(path: &Path) -> Result<Loaded<BTreeMap<String, Matrix>>> {
    load_tokens(path, QUERY_TOKEN_CAP, "query")
}

pub fn write_corpus(path: &Path, corpus: &Corpus, meta: Option<&Value>) -> Result<()> {
    write_tokens(path, corpus.iter(), meta)
}

pub fn write_queries(path: &Path, queries: &BTreeMap<String, Matrix>, meta: Option<&Value>) -> Result<()> {
    write_tokens(path, queries.iter(), meta)
}
