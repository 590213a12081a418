//! TOML experiment configuration.
//!
//! ```toml
//! [stream]            # synthetic Gaussian stream, or a [csv] table instead
//! num_tasks = 5
//! classes_per_task = 2
//! samples_per_class = 60
//! feature_dim = 30
//! class_separation = 4.0
//! within_class_std = 1.0
//! seed = 0
//!
//! [model]
//! input_dim = 30
//! hidden_dims = [8]
//!
//! [train]
//! strategy = "cofima"
//! lr_backbone = 0.05
//! lr_head = 0.1
//! epochs = 10
//! batch_size = 16
//! seed = 0
//!
//! [output]
//! dir = "out"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MlpConfig;
use crate::strategies::TrainConfig;
use crate::taskstream::{
    frozen_feature_projection, gen_gaussian_stream, load_csv_stream, load_csv_stream_split, StreamConfig, TaskStream,
};

/// Tasks read from CSV files (`label,f1,...,fd` per row, no header).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// All rows, or the training rows when `test` is given.
    pub path: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Class ids of each task, in task order.
    pub tasks: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Width of an optional frozen `tanh(Rx)` projection applied to inputs.
    #[serde(default)]
    pub projection_dim: Option<usize>,
    #[serde(default)]
    pub stream: Option<StreamConfig>,
    #[serde(default)]
    pub csv: Option<CsvSource>,
    pub model: MlpConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serialisable")
    }

    /// Schema checks that do not need the data on disk.
    pub fn validate(&self) -> Result<()> {
        match (&self.stream, &self.csv) {
            (Some(s), None) => s.validate().map_err(config_err)?,
            (None, Some(c)) => {
                if c.tasks.is_empty() || c.tasks.iter().any(Vec::is_empty) {
                    return Err(Error::Config("csv.tasks needs at least one non-empty task".into()));
                }
            }
            _ => return Err(Error::Config("exactly one of [stream] or [csv] is required".into())),
        }
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        if self.projection_dim == Some(0) {
            return Err(Error::Config("projection_dim must be >= 1".into()));
        }
        if let (Some(p), Some(s)) = (self.projection_dim, &self.stream) {
            self.check_input_dim(p).map_err(|e| Error::Config(format!("{e} (after projection of {})", s.feature_dim)))?;
        } else if let Some(s) = &self.stream {
            self.check_input_dim(s.feature_dim)?;
        }
        Ok(())
    }

    fn check_input_dim(&self, d: usize) -> Result<()> {
        if self.model.input_dim != d {
            return Err(Error::Config(format!(
                "model.input_dim = {} but the stream provides {d} features",
                self.model.input_dim
            )));
        }
        Ok(())
    }

    /// Sets the experiment seed: training, model init and synthetic data.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        if let Some(s) = self.stream.as_mut() {
            s.seed = seed;
        }
    }

    /// Generates or loads the task stream, then applies the projection.
    pub fn build_stream(&self) -> Result<TaskStream> {
        let stream = match (&self.stream, &self.csv) {
            (Some(s), _) => gen_gaussian_stream(s)?,
            (None, Some(c)) => match &c.test {
                Some(test) => load_csv_stream_split(&c.path, test, &c.tasks)?,
                None => load_csv_stream(&c.path, &c.tasks)?,
            },
            (None, None) => return Err(Error::Config("no data source".into())),
        };
        let stream = match self.projection_dim {
            Some(p) => frozen_feature_projection(&stream, p, self.train.seed)?,
            None => stream,
        };
        self.check_input_dim(stream.dim())?;
        Ok(stream)
    }

    /// Hash of the full configuration, recorded in every artifact.
    pub fn hash(&self) -> String {
        crate::strategies::content_hash(&serde_json::to_vec(self).expect("serialisable"))
    }
}
