use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// [`head_checksum`](super::head_checksum) of the final parameters.
    pub checksum: String,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Mean of the last `window` losses (or all of them when shorter).
    pub fn tail_mean(&self, window: usize) -> f64 {
        let n = self.losses.len();
        let tail = &self.losses[n.saturating_sub(window)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// `# key=value` header lines, then one `step\tlr\tloss` line per step.
pub fn render_trace(trace: &LossTrace, header: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in header {
        let _ = writeln!(out, "# {k}={v}");
    }
    let _ = writeln!(out, "# checksum={}", trace.checksum);
    for (step, (lr, loss)) in trace.lrs.iter().zip(&trace.losses).enumerate() {
        let _ = writeln!(out, "{step}\t{lr:e}\t{loss:e}");
    }
    out
}

pub fn write_trace(path: &Path, trace: &LossTrace, header: &BTreeMap<String, String>) -> Result<()> {
    std::fs::write(path, render_trace(trace, header)).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<LossTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trace = LossTrace::default();
    for (i, line) in text.lines().enumerate() {
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        if let Some(h) = line.strip_prefix('#') {
            if let Some(sum) = h.trim().strip_prefix("checksum=") {
                trace.checksum = sum.to_string();
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let step: usize = fields[0].parse().map_err(|e| parse_err(format!("step: {e}")))?;
        if step != trace.losses.len() {
            return Err(parse_err(format!("step {step} out of sequence")));
        }
        trace.lrs.push(fields[1].parse().map_err(|e| parse_err(format!("lr: {e}")))?);
        trace.losses.push(fields[2].parse().map_err(|e| parse_err(format!("loss: {e}")))?);
    }
    Ok(trace)
}
