//! Run configuration files (TOML, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srddpm_core::data::{
    load_raw, partition_with, shapes_dataset, DatasetKind, PartitionSpec, RawDatasetSpec, Split,
    TaskDataset, TaskRule,
};
use srddpm_core::diffusion::{build_linear_schedule, NoiseSchedule, Shape, SigmaMode};
use srddpm_core::metrics::EvalConfig;
use srddpm_core::model::ModelConfig;
use srddpm_core::trainer::TrainConfig;

use crate::error::{AppError, AppResult};

/// Overrides `data.root` when set.
pub const DATA_ROOT_ENV: &str = "SRDDPM_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    #[serde(default = "default_root")]
    pub root: PathBuf,
    #[serde(default)]
    pub task_rule: TaskRule,
    /// Training samples kept per task.
    #[serde(default = "default_samples")]
    pub samples_per_task: usize,
    /// Test samples per task for evaluation; all when unset.
    #[serde(default)]
    pub test_samples_per_task: Option<usize>,
    /// Labels that become tasks 1, 2, ... in order; all labels when unset.
    #[serde(default)]
    pub classes: Option<Vec<u32>>,
    /// Border added on each side, filled with the background value.
    #[serde(default)]
    pub pad: usize,
}

fn default_root() -> PathBuf {
    PathBuf::from("data")
}

fn default_samples() -> usize {
    500
}

impl DataConfig {
    pub fn image_shape(&self) -> Shape {
        let s = self.kind.image_shape();
        Shape::new(s.channels, s.height + 2 * self.pad, s.width + 2 * self.pad)
    }

    pub fn resolved_root(&self) -> PathBuf {
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(r) if !r.is_empty() => PathBuf::from(r),
            _ => self.root.clone(),
        }
    }

    /// Loads `split` and partitions it into tasks.
    pub fn load_tasks(&self, split: Split, seed: u64) -> AppResult<Vec<TaskDataset>> {
        let raw = match self.kind {
            DatasetKind::Shapes => shapes_dataset(split),
            kind => load_raw(&RawDatasetSpec::new(kind, self.resolved_root(), split))?,
        };
        let samples_per_task = match split {
            Split::Train => Some(self.samples_per_task),
            Split::Test => self.test_samples_per_task,
        };
        let spec = PartitionSpec {
            rule: self.task_rule,
            samples_per_task,
            classes: self.classes.clone(),
            seed,
            pad: self.pad,
            first_task_id: 1,
        };
        Ok(partition_with(&raw, &spec)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_mode: SigmaMode::Beta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> srddpm_core::Result<NoiseSchedule> {
        build_linear_schedule(self.steps, self.beta_start, self.beta_end, self.sigma_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub n_gen: usize,
    pub n_ref: Option<usize>,
    pub n_ssim: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            n_gen: e.n_gen,
            n_ref: e.n_ref,
            n_ssim: e.n_ssim,
            seed: e.seed,
        }
    }
}

impl MetricsConfig {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_gen: self.n_gen,
            n_ref: self.n_ref,
            n_ssim: self.n_ssim,
            seed: self.seed,
        }
    }
}

/// Everything one CLI invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialisation and the task sample selection.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    /// Required for `train`; ignored where a checkpoint supplies it.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> AppResult<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| AppError::Config {
            path: path.to_path_buf(),
            message: e.to_string().trim_end().replace('\n', " "),
        })?;
        config.validate(path)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text, path)
    }

    fn validate(&self, path: &Path) -> AppResult<()> {
        let fail = |message: String| AppError::Config {
            path: path.to_path_buf(),
            message,
        };
        if let Some(model) = &self.model {
            model.validate().map_err(|e| fail(e.to_string()))?;
            if model.image_shape() != self.data.image_shape() {
                return Err(fail(format!(
                    "model image {} does not match {} data {} (pad {})",
                    model.image_shape(),
                    self.data.kind.label(),
                    self.data.image_shape(),
                    self.data.pad
                )));
            }
            if let Some(classes) = &self.data.classes {
                if model.conditioning != srddpm_core::model::Conditioning::Unconditional
                    && classes.len() != model.n_tasks
                {
                    return Err(fail(format!(
                        "{} classes listed for a {}-task model",
                        classes.len(),
                        model.n_tasks
                    )));
                }
            }
        }
        self.train.validate().map_err(|e| fail(e.to_string()))?;
        self.schedule.build().map_err(|e| fail(e.to_string()))?;
        if self.data.task_rule == TaskRule::CoarseClass && self.data.kind != DatasetKind::Cifar100 {
            return Err(fail(format!("{} has no coarse labels", self.data.kind.label())));
        }
        Ok(())
    }

    /// The model section, or a config error naming the command.
    pub fn require_model(&self, path: &Path, command: &str) -> AppResult<&ModelConfig> {
        self.model.as_ref().ok_or_else(|| AppError::Config {
            path: path.to_path_buf(),
            message: format!("`{command}` needs a [model] section"),
        })
    }
}
