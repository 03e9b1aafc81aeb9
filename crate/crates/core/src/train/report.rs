use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, MetricsAccumulator, MetricsReport};

pub const LOSS_CSV_HEADER: &str = "fold,epoch,train_loss,val_loss";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_records: usize,
    pub val_records: usize,
    pub test_records: usize,
    pub epochs: Vec<EpochLosses>,
    pub stopped_early: bool,
    pub test_loss: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    /// Pixel-weighted BCE sum and pixel count, kept so folds merge exactly.
    pub bce_sum: f64,
    pub pixels: u64,
}

impl FoldReport {
    pub fn accumulator(&self) -> MetricsAccumulator {
        MetricsAccumulator {
            confusion: self.confusion,
            bce_sum: self.bce_sum,
            pixels: self.pixels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunReport {
    /// `"cv"` or `"split"`.
    pub mode: String,
    pub config: ExperimentConfig,
    pub folds: Vec<FoldReport>,
    pub aggregate_confusion: ConfusionMatrix,
    pub aggregate: MetricsReport,
    /// Kept out of the JSON so reports stay byte-identical across reruns.
    #[serde(skip)]
    pub wall_clock_seconds: Option<f64>,
}

impl TrainRunReport {
    pub fn new(mode: &str, config: ExperimentConfig, folds: Vec<FoldReport>) -> Self {
        let mut acc = MetricsAccumulator::default();
        for f in &folds {
            acc.merge(&f.accumulator());
        }
        TrainRunReport {
            mode: mode.to_string(),
            config,
            folds,
            aggregate_confusion: acc.confusion,
            aggregate: acc.report(),
            wall_clock_seconds: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("report {}", path.display())))
    }

    pub fn loss_csv(&self) -> String {
        let mut s = format!("{LOSS_CSV_HEADER}\n");
        for f in &self.folds {
            for e in &f.epochs {
                let _ = writeln!(s, "{},{},{},{}", f.fold, e.epoch, e.train_loss, e.val_loss);
            }
        }
        s
    }
}
