use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::loss::LossKind;
use super::trace::{LossRecord, LossTrace};
use crate::data::{batches, Batch, TaskDataset};
use crate::diffusion::{diffuse, ImageTensor, NoiseSchedule};
use crate::model::{params_init_exclusive, Conditioning, ModelConfig, ModelParams, Route, Unet};
use crate::rng::{seeded, Rng};
use crate::{Error, Result};

const NOISE_STREAM: u64 = 0xd1ff;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    /// Overrides the epoch-derived step count when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 64,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss_kind: LossKind::Mse,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.adam_beta1 > 0.0
            && self.adam_beta1 < 1.0
            && self.adam_beta2 > 0.0
            && self.adam_beta2 < 1.0
            && self.adam_eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Total optimisation steps for `total_samples` pooled samples.
    pub fn total_steps(&self, total_samples: usize) -> usize {
        self.max_steps
            .unwrap_or(self.epochs * steps_per_epoch(total_samples, self.batch_size))
    }
}

/// `ceil(total / batch)`: one epoch sees as many samples as the pooled dataset.
pub fn steps_per_epoch(total_samples: usize, batch_size: usize) -> usize {
    total_samples.div_ceil(batch_size)
}

/// Observer called around every optimisation step.
pub trait TrainHook {
    fn before_step(&mut self, _step: u64, _task: usize, _params: &ModelParams) {}
    fn after_step(&mut self, _step: u64, _task: usize, _loss: f64, _params: &ModelParams) {}
}

pub struct NoHook;

impl TrainHook for NoHook {}

#[allow(clippy::too_many_arguments)]
fn step_impl(
    unet: &Unet,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    batch: &Batch<'_>,
    rng: &mut Rng,
    freeze_shared: bool,
) -> Result<f64> {
    if batch.images.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let shape = unet.config().image_shape();
    let task = match unet.config().conditioning {
        Conditioning::Unconditional => None,
        _ => Some(batch.task_id),
    };
    let class = unet.class_index(task)?;
    let mut items = Vec::with_capacity(batch.images.len());
    for x0 in &batch.images {
        x0.ensure_shape(shape)?;
        let t = rng.random_range(1..=schedule.steps());
        let eps = ImageTensor::randn(shape, rng);
        let x_t = diffuse(x0, t, &eps, schedule)?;
        items.push(crate::model::BatchItem {
            x_t: x_t.into_data(),
            t,
            eps: eps.into_data(),
        });
    }
    let (loss, grads) = {
        let weights = params.weights(unet, task)?;
        unet.loss_and_grad(&weights, &items, class)
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let adam = config.adam();
    for (slot, grad) in unet.slots().iter().zip(&grads) {
        match slot.route {
            Route::Shared if freeze_shared => {}
            Route::Shared => {
                let tensor = params
                    .shared_mut()
                    .get_mut(&slot.name)
                    .expect("validated shared tensor");
                let moments = opt.shared_entry(&slot.name, grad.len());
                adam_step(tensor.data_mut(), grad, moments, &adam)?;
            }
            Route::Exclusive => {
                let task = task.expect("exclusive slots imply a task");
                let tensor = params
                    .exclusive_mut(task)
                    .and_then(|c| c.get_mut(&slot.name))
                    .expect("validated exclusive tensor");
                let moments = opt.exclusive_entry(task, &slot.name, grad.len());
                adam_step(tensor.data_mut(), grad, moments, &adam)?;
            }
        }
    }
    Ok(loss)
}

/// One optimisation step on a task-homogeneous batch.
///
/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` per image, then applies Adam to the
/// shared tensors and the batch task's exclusive tensors only.
pub fn train_step(
    unet: &Unet,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    batch: &Batch<'_>,
    rng: &mut Rng,
) -> Result<f64> {
    step_impl(unet, params, opt, config, schedule, batch, rng, false)
}

/// Full training run with a per-step observer.
pub fn train_with_hook(
    unet: &Unet,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    data: &[TaskDataset],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    hook: &mut dyn TrainHook,
) -> Result<LossTrace> {
    config.validate()?;
    let total: usize = data.iter().map(TaskDataset::len).sum();
    if total == 0 {
        return Err(Error::Data("training data is empty".into()));
    }
    if unet.config().conditioning != Conditioning::Unconditional {
        if let Some(t) = data.iter().find(|t| t.task_id == 0 || t.task_id > unet.config().n_tasks) {
            return Err(Error::Task(format!(
                "dataset task {} outside [1, {}]",
                t.task_id,
                unet.config().n_tasks
            )));
        }
    }
    let steps = config.total_steps(total);
    let mut stream = batches(data, config.batch_size, config.seed)?;
    let mut rng = seeded(config.seed, NOISE_STREAM);
    let mut trace = LossTrace::new();
    for step in 1..=steps as u64 {
        let batch = stream.next().expect("endless stream");
        hook.before_step(step, batch.task_id, params);
        let loss = train_step(unet, params, opt, config, schedule, &batch, &mut rng)?;
        hook.after_step(step, batch.task_id, loss, params);
        trace.push(LossRecord {
            step,
            task: batch.task_id,
            loss,
        });
    }
    Ok(trace)
}

/// Trains `params` on the task mixture and returns them with the loss trace.
pub fn train(
    unet: &Unet,
    mut params: ModelParams,
    data: &[TaskDataset],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(ModelParams, LossTrace)> {
    let mut opt = OptimizerState::new();
    let trace = train_with_hook(unet, &mut params, &mut opt, data, config, schedule, &mut NoHook)?;
    Ok((params, trace))
}

/// Appends a fresh exclusive collection for a new task and trains only it,
/// leaving every shared and pre-existing tensor untouched.
///
/// Returns the extended parameters, the config with `n_tasks + 1` and the
/// fine-tuning loss trace.
pub fn fine_tune_new_task(
    params: &ModelParams,
    model_config: &ModelConfig,
    new_task: &TaskDataset,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(ModelParams, ModelConfig, LossTrace)> {
    if model_config.conditioning != Conditioning::SharedRepresentation {
        return Err(Error::Config(format!(
            "adding a task needs a shared-representation model, got {}",
            model_config.conditioning.method_name()
        )));
    }
    config.validate()?;
    if new_task.is_empty() {
        return Err(Error::Data("new task has no samples".into()));
    }
    let old_unet = Unet::new(model_config)?;
    params.validate(&old_unet)?;

    let new_id = model_config.n_tasks + 1;
    let new_config = ModelConfig {
        n_tasks: new_id,
        ..model_config.clone()
    };
    let unet = Unet::new(&new_config)?;
    let mut params = params.clone();
    params.push_exclusive(params_init_exclusive(&unet, config.seed, new_id));

    let data = TaskDataset {
        task_id: new_id,
        ..new_task.clone()
    };
    let data = std::slice::from_ref(&data);
    let steps = config.total_steps(data[0].len());
    let mut stream = batches(data, config.batch_size, config.seed)?;
    let mut rng = seeded(config.seed, NOISE_STREAM);
    let mut opt = OptimizerState::new();
    let mut trace = LossTrace::new();
    for step in 1..=steps as u64 {
        let batch = stream.next().expect("endless stream");
        let loss = step_impl(&unet, &mut params, &mut opt, config, schedule, &batch, &mut rng, true)?;
        trace.push(LossRecord {
            step,
            task: new_id,
            loss,
        });
    }
    Ok((params, new_config, trace))
}
