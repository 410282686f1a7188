use rayon::prelude::*;

use super::features::{extract_features, FeatureExtractor};
use super::frechet::{fit_gaussian, frechet_distance};
use super::report::{MetricsReport, ReportRow};
use super::ssim::ssim;
use crate::data::TaskDataset;
use crate::diffusion::{diffuse, reverse_from, sample_chain, ImageTensor, NoiseSchedule};
use crate::model::{Conditioning, Denoiser, ModelParams, Unet};
use crate::rng::seeded;
use crate::{Error, Result};

const SSIM_STREAM: u64 = 0x551a;

/// Sample counts and seed for one evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalConfig {
    /// Generated samples for FID, split evenly over tasks.
    pub n_gen: usize,
    /// Reference test images for FID; `None` uses the whole test split.
    pub n_ref: Option<usize>,
    /// Test images reconstructed for SSIM.
    pub n_ssim: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_gen: 1000,
            n_ref: None,
            n_ssim: 100,
            seed: 0,
        }
    }
}

/// A trained model under evaluation.
pub struct EvalModel<'a> {
    pub method: String,
    pub unet: &'a Unet,
    pub params: &'a ModelParams,
    pub schedule: &'a NoiseSchedule,
}

impl EvalModel<'_> {
    fn task_arg(&self, task: usize) -> Option<usize> {
        match self.unet.config().conditioning {
            Conditioning::Unconditional => None,
            _ => Some(task),
        }
    }

    /// One full reverse chain for `task`, seeded by `(seed + task, index)`.
    pub fn generate(&self, task: usize, seed: u64, index: u64) -> Result<ImageTensor> {
        let den = Denoiser::new(self.unet, self.params, self.task_arg(task))?;
        let mut rng = seeded(seed.wrapping_add(task as u64), index);
        sample_chain(
            |x, t| den.predict(x, t),
            self.schedule,
            &mut rng,
            self.unet.config().image_shape(),
        )
    }
}

/// Test split of one dataset, already partitioned into tasks.
pub struct EvalDataset<'a> {
    pub name: String,
    pub tasks: &'a [TaskDataset],
}

/// Diffuses `x` to `T/2` and runs the reverse chain back to `t = 0`.
pub fn reconstruct(
    model: &EvalModel,
    x: &ImageTensor,
    task: usize,
    rng: &mut crate::rng::Rng,
) -> Result<ImageTensor> {
    let den = Denoiser::new(model.unet, model.params, model.task_arg(task))?;
    let t_half = (model.schedule.steps() / 2).max(1);
    let eps = ImageTensor::randn(x.shape(), rng);
    let x_t = diffuse(x, t_half, &eps, model.schedule)?;
    reverse_from(x_t, t_half, |x, t| den.predict(x, t), model.schedule, rng, |_, _| {})
}

/// Fréchet distance between the feature Gaussians of two image sets.
pub fn fid_between(a: &[ImageTensor], b: &[ImageTensor], extractor: &FeatureExtractor) -> Result<f64> {
    let fa = fit_gaussian(&extract_features(a, extractor)?)?;
    let fb = fit_gaussian(&extract_features(b, extractor)?)?;
    frechet_distance(&fa, &fb)
}

/// Test images taken round-robin over tasks: `(task_id, image)`.
fn interleaved(tasks: &[TaskDataset], n: usize) -> Vec<(usize, &ImageTensor)> {
    let longest = tasks.iter().map(TaskDataset::len).max().unwrap_or(0);
    (0..longest)
        .flat_map(|i| tasks.iter().filter_map(move |t| t.samples.get(i).map(|s| (t.task_id, s))))
        .take(n)
        .collect()
}

fn evaluate_one(
    model: &EvalModel,
    dataset: &EvalDataset,
    config: &EvalConfig,
    extractor: &FeatureExtractor,
) -> Result<ReportRow> {
    let shape = model.unet.config().image_shape();
    let available: usize = dataset.tasks.iter().map(TaskDataset::len).sum();
    for task in dataset.tasks {
        if let Some(s) = task.shape() {
            if s != shape {
                return Err(Error::shape(shape, s));
            }
        }
    }
    let n_ref = config.n_ref.unwrap_or(available);
    if config.n_gen < 2 || n_ref < 2 || dataset.tasks.is_empty() {
        return Err(Error::InsufficientSamples(format!(
            "FID needs at least 2 generated and 2 reference images (n_gen={}, n_ref={n_ref})",
            config.n_gen
        )));
    }
    if n_ref > available || config.n_ssim > available {
        return Err(Error::InsufficientSamples(format!(
            "{} has {available} test images, {} requested",
            dataset.name,
            n_ref.max(config.n_ssim)
        )));
    }

    let n_tasks = dataset.tasks.len();
    let jobs: Vec<(usize, u64)> = dataset
        .tasks
        .iter()
        .enumerate()
        .flat_map(|(k, t)| {
            let count = config.n_gen / n_tasks + usize::from(k < config.n_gen % n_tasks);
            (0..count as u64).map(move |j| (t.task_id, j))
        })
        .collect();
    let generated: Vec<ImageTensor> = jobs
        .par_iter()
        .map(|&(task, j)| model.generate(task, config.seed, j))
        .collect::<Result<_>>()?;
    let reference: Vec<ImageTensor> = interleaved(dataset.tasks, n_ref)
        .into_iter()
        .map(|(_, x)| x.clone())
        .collect();
    let fid = fid_between(&generated, &reference, extractor)?;

    let pairs = interleaved(dataset.tasks, config.n_ssim);
    let scores: Vec<f64> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (task, x))| {
            let mut rng = seeded(config.seed ^ SSIM_STREAM, i as u64);
            ssim(x, &reconstruct(model, x, *task, &mut rng)?)
        })
        .collect::<Result<_>>()?;
    let ssim_mean = if scores.is_empty() {
        f64::NAN
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    log::info!("{} / {}: fid {fid:.4} ssim {ssim_mean:.4}", dataset.name, model.method);
    Ok(ReportRow {
        dataset: dataset.name.clone(),
        n_tasks,
        method: model.method.clone(),
        fid,
        ssim: ssim_mean,
        n_gen: config.n_gen,
        n_ref,
        feature_space: extractor.space(),
    })
}

/// FID and half-chain SSIM for `model` on each dataset, one row per dataset.
///
/// Generated samples are pooled over tasks with one chain per sample; the
/// reference set and the SSIM images are taken round-robin over tasks.
pub fn evaluate(
    model: &EvalModel,
    datasets: &[EvalDataset],
    config: &EvalConfig,
    extractor: &FeatureExtractor,
) -> Result<MetricsReport> {
    let rows = datasets
        .iter()
        .map(|d| evaluate_one(model, d, config, extractor))
        .collect::<Result<_>>()?;
    Ok(MetricsReport { rows })
}
