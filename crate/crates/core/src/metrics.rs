//! Line-delimited metrics log: one structured record per step and per epoch,
//! preceded by a run header, every line carrying a schema version.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::Result;
use crate::losses::LossReport;
use crate::trainer::EpochSummary;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    RunHeader {
        schema: u32,
        run_id: String,
        arm: String,
        seed: u64,
        num_classes: usize,
        config: TrainConfig,
        dataset: serde_json::Value,
        code_version: String,
    },
    Step {
        schema: u32,
        epoch: usize,
        step: usize,
        losses: LossReport,
    },
    Epoch {
        schema: u32,
        summary: EpochSummary,
    },
}

/// Append-only JSONL writer.
pub struct MetricsWriter {
    out: Box<dyn Write + Send>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(MetricsWriter {
            out: Box::new(std::io::BufWriter::new(file)),
        })
    }

    /// Collect records in memory; used by tests.
    pub fn sink(buffer: std::sync::Arc<std::sync::Mutex<Vec<u8>>>) -> Self {
        struct SharedBuf(std::sync::Arc<std::sync::Mutex<Vec<u8>>>);
        impl Write for SharedBuf {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(buf);
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        MetricsWriter {
            out: Box::new(SharedBuf(buffer)),
        }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Read a whole metrics log back.
pub fn read_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}
