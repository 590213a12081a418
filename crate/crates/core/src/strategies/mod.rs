//! Continual-learning engine: per-task training, the merge loop and the
//! comparator strategies.

mod alignment;
mod baselines;
mod continual;
mod train;

pub use alignment::{classifier_alignment, collect_class_stats, sample_features, ClassStats, GaussianStats};
pub use baselines::{joint_training, prototype_classifier};
pub use continual::{run_continual, run_continual_observed, TaskEvent};
pub use train::{ewc_penalty, record_ewc_penalty, train_task, EwcTerm};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input, Result};
use crate::fisher::DEFAULT_EPSILON;
use crate::merge::{MergeStrategy, DEFAULT_EMA_BETA, DEFAULT_LAMBDA};
use crate::metrics;
use crate::model::ClassifierModel;
use crate::taskstream::LabeledDataset;

/// Everything a continual run can do after fine-tuning on a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SeqFt,
    Coma,
    Cofima,
    UniformRunning,
    BatchAverage,
    WiseFtTheta0,
    WiseFtPrev,
    Ema,
    Ewc,
    Prototype,
    Joint,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::SeqFt => "seq_ft",
            Strategy::Coma => "coma",
            Strategy::Cofima => "cofima",
            Strategy::UniformRunning => "uniform_running",
            Strategy::BatchAverage => "batch_average",
            Strategy::WiseFtTheta0 => "wise_ft_theta0",
            Strategy::WiseFtPrev => "wise_ft_prev",
            Strategy::Ema => "ema",
            Strategy::Ewc => "ewc",
            Strategy::Prototype => "prototype",
            Strategy::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| input(format!("unknown strategy `{s}`")))
    }

    /// The weight-space rule applied after each task, if any.
    pub fn merge_rule(self) -> Option<MergeStrategy> {
        Some(match self {
            Strategy::Coma => MergeStrategy::Coma,
            Strategy::Cofima => MergeStrategy::Cofima,
            Strategy::UniformRunning => MergeStrategy::UniformRunning,
            Strategy::BatchAverage => MergeStrategy::BatchAverage,
            Strategy::WiseFtTheta0 => MergeStrategy::WiseFtTheta0,
            Strategy::WiseFtPrev => MergeStrategy::WiseFtPrev,
            Strategy::Ema => MergeStrategy::Ema,
            _ => return None,
        })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where fine-tuning on task `t` starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitFrom {
    /// The merged model of the previous task.
    PrevMerged,
    /// The initial parameters (plus each head row's initial value).
    Pretrained,
}

/// When classifier alignment runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    EveryTask,
    FinalOnly,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_beta() -> f64 {
    DEFAULT_EMA_BETA
}
fn default_init() -> InitFrom {
    InitFrom::PrevMerged
}
fn default_align_mode() -> AlignMode {
    AlignMode::EveryTask
}
fn default_ca_samples() -> usize {
    64
}
fn default_ca_epochs() -> usize {
    10
}
fn default_ca_temperature() -> f64 {
    25.0
}
fn default_ca_lr() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub ewc_lambda: f64,
    #[serde(default = "default_beta")]
    pub ema_beta: f64,
    #[serde(default = "default_init")]
    pub init_from: InitFrom,
    /// Labels drawn per point for a Monte Carlo Fisher; exact when absent.
    #[serde(default)]
    pub fisher_mc_samples: Option<usize>,
    #[serde(default)]
    pub ca_enabled: bool,
    #[serde(default = "default_align_mode")]
    pub ca_mode: AlignMode,
    #[serde(default = "default_ca_samples")]
    pub ca_samples_per_class: usize,
    #[serde(default = "default_ca_epochs")]
    pub ca_epochs: usize,
    #[serde(default = "default_ca_temperature")]
    pub ca_temperature: f64,
    /// Head step size during alignment. Norm-scaled logits have gradients
    /// of order `temperature / ‖z‖`, so this is kept well below `lr_head`.
    #[serde(default = "default_ca_lr")]
    pub ca_lr: f64,
}

impl TrainConfig {
    /// Plain sequential fine-tuning with the given learning rates.
    pub fn new(strategy: Strategy, lr_backbone: f64, lr_head: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            lr_backbone,
            lr_head,
            epochs,
            batch_size,
            seed,
            strategy,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            ewc_lambda: 0.0,
            ema_beta: DEFAULT_EMA_BETA,
            init_from: InitFrom::PrevMerged,
            fisher_mc_samples: None,
            ca_enabled: false,
            ca_mode: AlignMode::EveryTask,
            ca_samples_per_class: default_ca_samples(),
            ca_epochs: default_ca_epochs(),
            ca_temperature: default_ca_temperature(),
            ca_lr: default_ca_lr(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_backbone >= 0.0) || !(self.lr_head >= 0.0) {
            return Err(input("learning rates must be >= 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(input("epochs and batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(input(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(input("epsilon must be > 0"));
        }
        if !(self.ewc_lambda >= 0.0) {
            return Err(input("ewc_lambda must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(input("ema_beta must be in [0, 1)"));
        }
        if self.fisher_mc_samples == Some(0) {
            return Err(input("fisher_mc_samples must be >= 1"));
        }
        if !(self.ca_lr >= 0.0) || !(self.ca_temperature > 0.0) {
            return Err(input("ca_lr must be >= 0 and ca_temperature > 0"));
        }
        if self.ca_enabled && (self.ca_samples_per_class == 0 || self.ca_epochs == 0) {
            return Err(input("classifier alignment needs samples and epochs >= 1"));
        }
        Ok(())
    }

    /// Short content hash used for provenance.
    pub fn hash(&self) -> String {
        content_hash(&serde_json::to_vec(self).expect("serialisable"))
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

/// Evaluation on the pooled test data of every task seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: usize,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl TaskEval {
    pub fn new(task: usize, predictions: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        Ok(TaskEval {
            task,
            accuracy: metrics::accuracy(&predictions, &labels)?,
            predictions,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub strategy: Strategy,
    pub lambda: f64,
    pub seed: u64,
    pub config_hash: String,
    /// Accuracy (%) on all seen classes after each task.
    pub acc_matrix: Vec<f64>,
    pub last_acc: f64,
    pub inc_acc: f64,
    pub evals: Vec<TaskEval>,
    /// Number of weight merges applied after each task.
    pub merges_per_task: Vec<usize>,
    /// Seconds per task; excluded from [`ExperimentReport::same_results`].
    #[serde(skip)]
    pub wall_time_s: Vec<f64>,
}

impl ExperimentReport {
    pub(crate) fn from_evals(
        config: &TrainConfig,
        evals: Vec<TaskEval>,
        merges_per_task: Vec<usize>,
        wall_time_s: Vec<f64>,
    ) -> Result<Self> {
        let acc_matrix: Vec<f64> = evals.iter().map(|e| e.accuracy).collect();
        Ok(ExperimentReport {
            strategy: config.strategy,
            lambda: config.lambda,
            seed: config.seed,
            config_hash: config.hash(),
            last_acc: metrics::last_acc(&acc_matrix)?,
            inc_acc: metrics::inc_acc(&acc_matrix)?,
            acc_matrix,
            evals,
            merges_per_task,
            wall_time_s,
        })
    }

    /// True when accuracies and every stored prediction agree.
    pub fn same_results(&self, other: &ExperimentReport) -> bool {
        self.acc_matrix == other.acc_matrix
            && self.last_acc == other.last_acc
            && self.inc_acc == other.inc_acc
            && self.evals == other.evals
    }
}

/// Predictions of `model` on `data` wrapped as a [`TaskEval`].
pub fn evaluate(model: &ClassifierModel, data: &LabeledDataset, task: usize) -> Result<TaskEval> {
    let pred = model.predict(data.features())?;
    TaskEval::new(task, pred, data.labels().to_vec())
}
