use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::raw::RawDataset;
use crate::diffusion::{ImageTensor, Shape};
use crate::rng::seeded;
use crate::{Error, Result};

/// Which label defines a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TaskRule {
    /// One task per class label.
    #[default]
    FineClass,
    /// One task per CIFAR-100 superclass.
    CoarseClass,
}

/// The samples of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    /// 1-based task id.
    pub task_id: usize,
    pub samples: Vec<ImageTensor>,
    /// Source class label backing the task.
    pub label_meta: Vec<u32>,
    /// Indices into the raw dataset, in sample order.
    pub source_indices: Vec<usize>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> Option<Shape> {
        self.samples.first().map(ImageTensor::shape)
    }
}

/// Full control over how raw data becomes tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub rule: TaskRule,
    /// Samples kept per task; `None` keeps every sample (test splits).
    pub samples_per_task: Option<usize>,
    /// Restrict to these labels, in this order; `None` takes all present.
    pub classes: Option<Vec<u32>>,
    pub seed: u64,
    /// Border added on every side, filled with the background value -1.
    pub pad: usize,
    /// Task id given to the first class.
    pub first_task_id: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            rule: TaskRule::FineClass,
            samples_per_task: Some(500),
            classes: None,
            seed: 0,
            pad: 0,
            first_task_id: 1,
        }
    }
}

/// Maps a byte to `[-1, 1]` via `b / 127.5 - 1`.
pub fn normalize(byte: u8) -> f32 {
    byte as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize`], clamping to `[0, 255]`.
pub fn denormalize(x: f32) -> u8 {
    ((x as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Normalises a CHW byte image, optionally padding each spatial side.
pub fn normalize_image(bytes: &[u8], shape: Shape, pad: usize) -> ImageTensor {
    let (h, w) = (shape.height + 2 * pad, shape.width + 2 * pad);
    let out_shape = Shape::new(shape.channels, h, w);
    let mut data = vec![-1.0f32; out_shape.len()];
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let b = bytes[(c * shape.height + y) * shape.width + x];
                data[(c * h + y + pad) * w + x + pad] = normalize(b);
            }
        }
    }
    ImageTensor::from_raw(out_shape, data)
}

pub fn denormalize_image(image: &ImageTensor) -> Vec<u8> {
    image.data().iter().map(|v| denormalize(*v)).collect()
}

/// One task per class under `rule`, keeping `m` samples per task.
pub fn partition_tasks(raw: &RawDataset, rule: TaskRule, m: usize, seed: u64) -> Result<Vec<TaskDataset>> {
    partition_with(
        raw,
        &PartitionSpec {
            rule,
            samples_per_task: Some(m),
            seed,
            ..PartitionSpec::default()
        },
    )
}

pub fn partition_with(raw: &RawDataset, spec: &PartitionSpec) -> Result<Vec<TaskDataset>> {
    let labels: &[u8] = match spec.rule {
        TaskRule::FineClass => &raw.fine,
        TaskRule::CoarseClass => raw.coarse.as_deref().ok_or_else(|| {
            Error::Data(format!("{} has no coarse labels", raw.kind.label()))
        })?,
    };
    let classes: Vec<u32> = match &spec.classes {
        Some(c) => c.clone(),
        None => labels
            .iter()
            .map(|l| *l as u32)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    if classes.is_empty() {
        return Err(Error::Data("no classes selected".into()));
    }
    let mut tasks = Vec::with_capacity(classes.len());
    for (k, &class) in classes.iter().enumerate() {
        let mut indices: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l as u32 == class)
            .map(|(i, _)| i)
            .collect();
        if let Some(m) = spec.samples_per_task {
            if indices.len() < m {
                return Err(Error::InsufficientSamples(format!(
                    "class {class} has {} samples, {m} requested",
                    indices.len()
                )));
            }
            indices.shuffle(&mut seeded(spec.seed, 0x1000 + class as u64));
            indices.truncate(m);
        } else if indices.is_empty() {
            return Err(Error::InsufficientSamples(format!("class {class} has no samples")));
        }
        let samples = indices
            .iter()
            .map(|&i| normalize_image(raw.image_bytes(i), raw.shape, spec.pad))
            .collect();
        tasks.push(TaskDataset {
            task_id: spec.first_task_id + k,
            samples,
            label_meta: vec![class],
            source_indices: indices,
        });
    }
    Ok(tasks)
}
