//! Reproducible training harnesses for the five study designs, at desk
//! scale: supervised from scratch, MAE pre-train / fine-tune, the position
//! embedding ablation, the pixel-permutation study, the two patch-size
//! trend sweeps, and the learning-rate stability sweep.

mod presets;
mod studies;
mod train;

pub use presets::*;
pub use studies::{
    run_lr_sweep, run_pe_ablation, run_permutation_study, run_trend_sweep, LrSweepRow,
    PeAblationRow, PermutationStudyOutput, PermutationStudyRow, TrendRow,
};
pub use train::{evaluate_classifier, run_mae_finetune, run_mae_pretrain, run_supervised};

use crate::data::{AugmentationConfig, DataError, DatasetSpec};
use crate::model::{MaeConfig, ModelConfig, ModelError};
use crate::numerics::NumericsError;
use crate::optim::{OptimError, OptimizerConfig};
use crate::tokenization::{DeltaBound, TokenizationError};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenization(#[from] TokenizationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Supervised,
    MaePretrain,
    MaeFinetune,
    PeAblation,
    PermutationStudy,
    TrendSweep,
    LrSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendMode {
    /// Co-vary (input size, patch size) holding L fixed; input = p·base_side.
    FixedSequenceLength,
    /// Hold the input size fixed and vary the patch size down to 1.
    FixedInputSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendSpec {
    pub mode: TrendMode,
    pub patch_sizes: Vec<usize>,
    /// √L for fixed_sequence_length; the input side for fixed_input_size.
    pub base_side: usize,
}

/// Epoch counts and lr floor; steps-per-epoch is derived from the dataset
/// at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl ScheduleSpec {
    pub fn to_schedule(&self, steps_per_epoch: usize) -> crate::optim::ScheduleConfig {
        crate::optim::ScheduleConfig {
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.total_epochs,
            min_lr: self.min_lr,
            steps_per_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: Study,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleSpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub augment: AugmentationConfig,
    #[serde(default)]
    pub mae: Option<MaeConfig>,
    pub batch_size: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    pub seed: u64,
    #[serde(default)]
    pub ema_decay: Option<f64>,
    #[serde(default)]
    pub layerwise_decay: Option<f64>,
    /// Stop once the train accuracy reaches this level (smoke runs).
    #[serde(default)]
    pub early_stop_train_acc: Option<f64>,
    #[serde(default)]
    pub t_list: Option<Vec<usize>>,
    #[serde(default)]
    pub delta_list: Option<Vec<DeltaBound>>,
    #[serde(default)]
    pub lr_list: Option<Vec<f64>>,
    #[serde(default)]
    pub trend: Option<TrendSpec>,
    /// MAE fine-tuning initialization checkpoint.
    #[serde(default)]
    pub finetune_init: Option<PathBuf>,
}

fn default_eval_interval() -> usize {
    10
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(ExperimentError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(ExperimentError::InvalidConfig("eval_interval must be positive".into()));
        }
        if self.schedule.warmup_epochs >= self.schedule.total_epochs {
            return Err(ExperimentError::InvalidConfig(format!(
                "warmup ({}) must be shorter than the run ({})",
                self.schedule.warmup_epochs, self.schedule.total_epochs
            )));
        }
        match self.study {
            Study::MaePretrain | Study::MaeFinetune => {
                let mae = self.mae.as_ref().ok_or_else(|| {
                    ExperimentError::InvalidConfig("MAE studies need the `mae` section".into())
                })?;
                mae.validate()?;
                if self.study == Study::MaeFinetune && self.finetune_init.is_none() {
                    return Err(ExperimentError::InvalidConfig(
                        "mae_finetune needs `finetune_init`".into(),
                    ));
                }
            }
            Study::PermutationStudy => {
                if self.t_list.as_ref().map_or(true, |v| v.is_empty()) {
                    return Err(ExperimentError::InvalidConfig(
                        "permutation_study needs a nonempty `t_list`".into(),
                    ));
                }
                if self.delta_list.as_ref().map_or(true, |v| v.is_empty()) {
                    return Err(ExperimentError::InvalidConfig(
                        "permutation_study needs a nonempty `delta_list`".into(),
                    ));
                }
            }
            Study::LrSweep => {
                if self.lr_list.as_ref().map_or(true, |v| v.is_empty()) {
                    return Err(ExperimentError::InvalidConfig(
                        "lr_sweep needs a nonempty `lr_list`".into(),
                    ));
                }
            }
            Study::TrendSweep => {
                let trend = self.trend.as_ref().ok_or_else(|| {
                    ExperimentError::InvalidConfig("trend_sweep needs the `trend` section".into())
                })?;
                if trend.patch_sizes.is_empty() || trend.base_side == 0 {
                    return Err(ExperimentError::InvalidConfig(
                        "trend needs patch sizes and a base side".into(),
                    ));
                }
            }
            Study::Supervised | Study::PeAblation => {}
        }
        Ok(())
    }
}

/// One metrics line; `seconds` is wall time and is excluded from
/// reproducibility comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub split: String,
    pub loss: f64,
    pub acc1: f64,
    pub acc5: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,acc1,acc5,lr,seconds";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        debug_assert!(
            self.rows.last().map_or(true, |r| r.epoch <= row.epoch),
            "rows must be monotone in epoch"
        );
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                r.epoch, r.split, r.loss, r.acc1, r.acc5, r.lr, r.seconds
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<MetricsLog, ExperimentError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != METRICS_HEADER {
                    return Err(ExperimentError::InvalidConfig(format!(
                        "bad metrics header {:?}",
                        line
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(ExperimentError::InvalidConfig(format!(
                    "metrics line {} has {} fields",
                    i + 1,
                    f.len()
                )));
            }
            let num =
                |s: &str| s.parse::<f64>().map_err(|_| {
                    ExperimentError::InvalidConfig(format!("bad number {:?} on line {}", s, i + 1))
                });
            rows.push(MetricsRow {
                epoch: f[0].parse().map_err(|_| {
                    ExperimentError::InvalidConfig(format!("bad epoch {:?}", f[0]))
                })?,
                split: f[1].to_string(),
                loss: num(f[2])?,
                acc1: num(f[3])?,
                acc5: num(f[4])?,
                lr: num(f[5])?,
                seconds: num(f[6])?,
            });
        }
        Ok(MetricsLog { rows })
    }

    pub fn last_of(&self, split: &str) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    pub fn best_val_acc1(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == "val")
            .map(|r| r.acc1)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    /// Equality for reproducibility checks: every field except wall time.
    pub fn same_results(&self, other: &MetricsLog) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.split == b.split
                    && a.loss == b.loss
                    && a.acc1 == b.acc1
                    && a.acc5 == b.acc5
                    && a.lr == b.lr
            })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub study: Study,
    pub seed: u64,
    pub epochs_run: u64,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub final_val_acc1: Option<f64>,
    pub best_val_acc1: Option<f64>,
    /// Validation loss before any training step (MAE smoke baseline).
    pub initial_val_loss: Option<f64>,
    pub wall_seconds: f64,
    pub diverged: bool,
}

#[derive(Debug)]
pub struct RunOutput {
    pub metrics: MetricsLog,
    pub summary: RunSummary,
    pub last_ckpt: PathBuf,
    pub best_ckpt: Option<PathBuf>,
}

pub(crate) fn write_run_files(
    out_dir: &std::path::Path,
    metrics: &MetricsLog,
    summary: &RunSummary,
) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics.to_csv())?;
    std::fs::write(out_dir.join("summary.json"), serde_json::to_vec_pretty(summary)?)?;
    Ok(())
}

#[cfg(test)]
mod tests;
