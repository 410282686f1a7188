use rand::seq::index::sample;
use rand::Rng as _;

use super::tasks::TaskDataset;
use crate::rng::{seeded, Rng};
use crate::diffusion::ImageTensor;
use crate::{Error, Result};

/// A task-homogeneous batch.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub task_id: usize,
    pub images: Vec<&'a ImageTensor>,
}

/// Endless seeded stream: each item draws a task uniformly, then
/// `batch_size` distinct samples from it.
pub struct BatchStream<'a> {
    tasks: &'a [TaskDataset],
    batch_size: usize,
    rng: Rng,
}

pub fn batches(tasks: &[TaskDataset], batch_size: usize, seed: u64) -> Result<BatchStream<'_>> {
    if tasks.is_empty() {
        return Err(Error::Data("no tasks".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(t) = tasks.iter().find(|t| t.len() < batch_size) {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds the {} samples of task {}",
            t.len(),
            t.task_id
        )));
    }
    Ok(BatchStream {
        tasks,
        batch_size,
        rng: seeded(seed, 0xba7c),
    })
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        let task = &self.tasks[self.rng.random_range(0..self.tasks.len())];
        let picks = sample(&mut self.rng, task.len(), self.batch_size);
        Some(Batch {
            task_id: task.task_id,
            images: picks.iter().map(|i| &task.samples[i]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Shape;

    fn tasks(n: usize, m: usize) -> Vec<TaskDataset> {
        (1..=n)
            .map(|id| TaskDataset {
                task_id: id,
                samples: (0..m)
                    .map(|k| ImageTensor::filled(Shape::new(1, 1, 1), (id * 100 + k) as f32 / 1e4))
                    .collect(),
                label_meta: vec![id as u32],
                source_indices: (0..m).collect(),
            })
            .collect()
    }

    #[test]
    fn batches_are_task_homogeneous_without_repeats() {
        let ts = tasks(3, 10);
        for b in batches(&ts, 6, 1).unwrap().take(200) {
            assert_eq!(b.images.len(), 6);
            let mut vals: Vec<u32> = b.images.iter().map(|i| (i.data()[0] * 1e4).round() as u32).collect();
            assert!(vals.iter().all(|v| *v as usize / 100 == b.task_id));
            vals.sort();
            vals.dedup();
            assert_eq!(vals.len(), 6);
        }
    }

    #[test]
    fn uniform_task_frequencies() {
        let ts = tasks(4, 8);
        let mut counts = [0usize; 4];
        for b in batches(&ts, 2, 9).unwrap().take(10_000) {
            counts[b.task_id - 1] += 1;
        }
        for c in counts {
            assert!((c as f64 / 2500.0 - 1.0).abs() < 0.05, "{counts:?}");
        }
    }

    #[test]
    fn single_task() {
        let ts = tasks(1, 4);
        assert!(batches(&ts, 4, 0).unwrap().take(50).all(|b| b.task_id == 1));
    }

    #[test]
    fn oversized_batch_rejected() {
        let ts = tasks(2, 4);
        assert!(batches(&ts, 5, 0).is_err());
        assert!(batches(&[], 1, 0).is_err());
    }

    #[test]
    fn stream_is_seeded() {
        let ts = tasks(3, 6);
        let a: Vec<_> = batches(&ts, 3, 5).unwrap().take(20).map(|b| (b.task_id, b.images[0].data()[0])).collect();
        let b: Vec<_> = batches(&ts, 3, 5).unwrap().take(20).map(|b| (b.task_id, b.images[0].data()[0])).collect();
        assert_eq!(a, b);
    }
}
