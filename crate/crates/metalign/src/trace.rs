//! Per-step training trace, persisted as line-delimited JSON.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use metalign_core::losses::LossParts;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parts: Option<LossParts>,
    /// Wall clock is informational only; determinism comparisons must use
    /// the loss columns.
    pub wall_ms: u64,
}

pub struct TraceWriter {
    out: BufWriter<std::fs::File>,
    step: usize,
    started: std::time::Instant,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(TraceWriter {
            out: BufWriter::new(std::fs::File::create(path)?),
            step: 0,
            started: std::time::Instant::now(),
        })
    }

    pub fn record(
        &mut self,
        stage: &str,
        epoch: usize,
        lr: f64,
        total: f64,
        parts: Option<LossParts>,
    ) -> Result<TraceRow> {
        let row = TraceRow {
            step: self.step,
            stage: stage.to_string(),
            epoch,
            lr,
            total,
            parts,
            wall_ms: self.started.elapsed().as_millis() as u64,
        };
        writeln!(self.out, "{}", serde_json::to_string(&row)?)?;
        self.step += 1;
        Ok(row)
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

/// Window-averaged start-vs-end comparison: true when the mean of the last
/// window is strictly below the mean of the first.
pub fn smoothed_decrease(rows: &[TraceRow], stage: &str) -> Option<(f64, f64)> {
    let losses: Vec<f64> = rows
        .iter()
        .filter(|r| r.stage == stage)
        .map(|r| r.total)
        .collect();
    if losses.len() < 2 {
        return None;
    }
    let window = (losses.len() / 10).clamp(1, 50).min(losses.len() / 2).max(1);
    let head: f64 = losses[..window].iter().sum::<f64>() / window as f64;
    let tail: f64 = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    Some((head, tail))
}
