use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StepMetrics;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: String,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce_o: Option<f64>,
    pub loss_ce_w: Option<f64>,
    pub loss_ce_e: Option<f64>,
    pub loss_center: Option<f64>,
    pub acc_train: f64,
}

impl StepRecord {
    pub fn new(epoch: usize, step: u64, m: &StepMetrics) -> Self {
        Self {
            kind: "step".into(),
            epoch,
            step,
            lr: m.lr,
            loss_total: m.loss_total,
            loss_ce_o: m.loss_ce[0],
            loss_ce_w: m.loss_ce[1],
            loss_ce_e: m.loss_ce[2],
            loss_center: m.loss_center,
            acc_train: m.acc_train(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce_o: Option<f64>,
    pub loss_ce_w: Option<f64>,
    pub loss_ce_e: Option<f64>,
    pub loss_center: Option<f64>,
    pub acc_train: f64,
    pub acc_test: f64,
}

#[derive(Serialize)]
struct Tagged<'a, R> {
    kind: &'static str,
    #[serde(flatten)]
    record: &'a R,
}

/// Append-only `metrics.jsonl` writer, one JSON object per line.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

pub trait Record: Serialize {
    fn to_line(&self) -> Result<String>;
}

impl Record for StepRecord {
    fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

impl Record for EpochRecord {
    fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&Tagged {
            kind: "epoch",
            record: self,
        })?)
    }
}

impl MetricsLog {
    /// Starts a fresh log, truncating any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Continues an existing log.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &impl Record) -> Result<()> {
        let mut line = record.to_line()?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}
