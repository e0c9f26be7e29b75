//! Append-only JSONL metric logs.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: u64,
    pub task: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub ffn_kind: String,
}

/// Serializes records one per line. Steps must not decrease and values
/// must be finite.
pub struct MetricsWriter<W: Write> {
    out: W,
    last_step: Option<u64>,
    written: usize,
}

impl MetricsWriter<BufWriter<File>> {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(BufWriter::new(file)))
    }

    /// Creates or truncates `path`.
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            out,
            last_step: None,
            written: 0,
        }
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        if !record.value.is_finite() {
            return Err(Error::Metrics(format!(
                "non-finite {} at step {}",
                record.metric, record.step
            )));
        }
        if let Some(last) = self.last_step {
            if record.step < last {
                return Err(Error::Metrics(format!("step {} after step {last}", record.step)));
            }
        }
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.last_step = Some(record.step);
        self.written += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
