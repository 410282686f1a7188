use std::collections::BTreeMap;

use srddpm_core::data::{batches, partition_tasks, shapes_dataset, Split, TaskDataset, TaskRule};
use srddpm_core::diffusion::{build_linear_schedule, NoiseSchedule, SigmaMode};
use srddpm_core::model::{init_model, Conditioning, Denoiser, ModelConfig, StagePosition, Unet};
use srddpm_core::rng::seeded;
use srddpm_core::diffusion::sample_chain;
use srddpm_core::trainer::{fine_tune_new_task, train, TrainConfig};

fn config(conditioning: Conditioning, n_tasks: usize) -> ModelConfig {
    ModelConfig {
        image_channels: 1,
        image_size: 16,
        base_channels: 8,
        n_stages: 2,
        n_tasks,
        exclusive_stages: if conditioning == Conditioning::SharedRepresentation {
            [StagePosition::First, StagePosition::Last].into()
        } else {
            Default::default()
        },
        conditioning,
        time_embed_dim: 16,
    }
}

fn schedule() -> NoiseSchedule {
    build_linear_schedule(100, 1e-4, 0.02, SigmaMode::Beta).unwrap()
}

fn shapes(per_task: usize) -> Vec<TaskDataset> {
    partition_tasks(&shapes_dataset(Split::Train), TaskRule::FineClass, per_task, 0).unwrap()
}

fn steps(n: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        batch_size,
        max_steps: Some(n),
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    for conditioning in [
        Conditioning::Unconditional,
        Conditioning::ClassConditional,
        Conditioning::SharedRepresentation,
    ] {
        let config = config(conditioning, 3);
        let unet = Unet::new(&config).unwrap();
        let data = shapes(8);
        let run = || train(&unet, init_model(&config, 3).unwrap(), &data, &steps(5, 4), &schedule()).unwrap();
        let (p1, t1) = run();
        let (p2, t2) = run();
        assert_eq!(t1, t2);
        assert_eq!(p1, p2);
    }
}

#[test]
fn first_step_loss_is_near_one() {
    let config = config(Conditioning::SharedRepresentation, 3);
    let unet = Unet::new(&config).unwrap();
    let (_, trace) = train(&unet, init_model(&config, 0).unwrap(), &shapes(32), &steps(1, 32), &schedule()).unwrap();
    let first = trace.records()[0].loss;
    assert!((first - 1.0).abs() < 0.2, "{first}");
}

#[test]
fn tasks_are_drawn_uniformly() {
    let data = shapes(8);
    let mut counts = BTreeMap::new();
    let n = 30_000;
    for b in batches(&data, 4, 9).unwrap().take(n) {
        *counts.entry(b.task_id).or_insert(0usize) += 1;
    }
    for (task, c) in counts {
        let freq = c as f64 / n as f64;
        assert!((freq - 1.0 / 3.0).abs() < 0.05 / 3.0, "task {task}: {freq}");
    }
}

#[test]
fn fine_tuning_freezes_old_tensors_and_learns() {
    let base = config(Conditioning::SharedRepresentation, 2);
    let unet = Unet::new(&base).unwrap();
    let data = shapes(16);
    let (params, _) = train(&unet, init_model(&base, 0).unwrap(), &data[..2], &steps(40, 8), &schedule()).unwrap();

    let sample_old = |params, config: &ModelConfig| {
        let unet = Unet::new(config).unwrap();
        let den = Denoiser::new(&unet, params, Some(1)).unwrap();
        sample_chain(|x, t| den.predict(x, t), &schedule(), &mut seeded(4, 0), config.image_shape()).unwrap()
    };
    let before = sample_old(&params, &base);

    let (tuned, new_config, trace) =
        fine_tune_new_task(&params, &base, &data[2], &steps(150, 8), &schedule()).unwrap();
    assert_eq!(new_config.n_tasks, 3);
    assert_eq!(tuned.shared(), params.shared());
    assert_eq!(tuned.exclusive(1), params.exclusive(1));
    assert_eq!(tuned.exclusive(2), params.exclusive(2));
    assert_eq!(tuned.n_exclusive(), 3);
    assert!(trace.records().iter().all(|r| r.task == 3));
    assert!(trace.tail_mean(30) < trace.head_mean(30), "{} vs {}", trace.head_mean(30), trace.tail_mean(30));
    assert_eq!(sample_old(&tuned, &new_config), before);
}

#[test]
fn fine_tuning_needs_shared_representation() {
    let base = config(Conditioning::ClassConditional, 2);
    let params = init_model(&base, 0).unwrap();
    let data = shapes(8);
    assert!(fine_tune_new_task(&params, &base, &data[2], &steps(1, 4), &schedule()).is_err());
}
