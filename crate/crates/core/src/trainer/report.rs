use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Averages over one epoch's iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_classification: f64,
    pub loss_scale: f64,
    pub train_accuracy: f64,
    /// Evaluation-mode accuracy at `S = 1` when a validation set is given.
    pub val_accuracy: Option<f64>,
    /// Mean gate value over samples and blocks (fraction of blocks).
    pub mean_usage: f64,
    pub scale_mean: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub grad_norm: f64,
}

pub const REPORT_HEADER: &str =
    "phase,epoch,lr,loss_total,loss_classification,loss_scale,train_accuracy,val_accuracy,mean_usage,scale_mean,scale_min,scale_max,grad_norm";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let val = self.val_accuracy.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.phase,
            self.epoch,
            self.lr,
            self.loss_total,
            self.loss_classification,
            self.loss_scale,
            self.train_accuracy,
            val,
            self.mean_usage,
            self.scale_mean,
            self.scale_min,
            self.scale_max,
            self.grad_norm
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn extend(&mut self, other: TrainReport) {
        self.epochs.extend(other.epochs);
        if other.checkpoint.is_some() {
            self.checkpoint = other.checkpoint;
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Appends one row, writing the header first if the file is new or empty.
    pub fn append_csv(path: &Path, record: &EpochRecord) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{REPORT_HEADER}")?;
        }
        writeln!(f, "{}", record.csv_row())?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
