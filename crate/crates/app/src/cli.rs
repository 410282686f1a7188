//! `srddpm` subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use srddpm_core::data::Split;
use srddpm_core::diffusion::{reverse_from, ImageTensor};
use srddpm_core::metrics::{evaluate, EvalDataset, EvalModel, FeatureExtractor, MetricsReport};
use srddpm_core::model::{init_model, Conditioning, Denoiser, ModelParams, Unet};
use srddpm_core::rng::seeded;
use srddpm_core::trainer::{fine_tune_new_task, train_with_hook, LossTrace, OptimizerState, TrainHook};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LineageEntry};
use crate::config::RunConfig;
use crate::error::{AppError, AppResult, ExitStatus};
use crate::images::Raster;

/// Checkpoint directory inside a run's output directory.
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_CSV: &str = "loss.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "srddpm", version, about = "Multi-task diffusion models with shared representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write `checkpoint/` and `loss.csv` to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw samples per task as PNG files plus one grid per task.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Task id, or `all`.
        #[arg(long)]
        task: TaskSelection,
        #[arg(short = 'n', long = "count", default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// FID and SSIM for one or more checkpoints on the configured test split.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
    },
    /// Train task-exclusive layers for a new task with everything else frozen.
    AddTask {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Save intermediate latents of one sampling chain as a PNG strip.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// `--task` argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSelection {
    All,
    One(usize),
}

impl FromStr for TaskSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TaskSelection::All);
        }
        s.parse()
            .map(TaskSelection::One)
            .map_err(|_| format!("expected a task id or `all`, got `{s}`"))
    }
}

/// Parses arguments, runs the command and reports failures on stderr.
pub fn run<I, T>(args: I) -> ExitStatus
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitStatus::Usage } else { ExitStatus::Ok };
        }
    };
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config).map(|_| ()),
        Command::Sample {
            ckpt,
            task,
            count,
            seed,
            out,
        } => cmd_sample(&ckpt, task, count, seed, &out),
        Command::Eval { ckpt, config } => cmd_eval(&ckpt, &config).map(|r| print!("{}", r.to_table())),
        Command::AddTask { ckpt, config } => cmd_add_task(&ckpt, &config).map(|_| ()),
        Command::Trace {
            ckpt,
            task,
            seed,
            stride,
            out,
        } => cmd_trace(&ckpt, task, seed, stride, &out).map(|_| ()),
    };
    match result {
        Ok(()) => ExitStatus::Ok,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_status()
        }
    }
}

fn create_dir(path: &Path) -> AppResult<()> {
    fs::create_dir_all(path).map_err(|e| AppError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> AppResult<()> {
    fs::write(path, contents).map_err(|e| AppError::io(path, e))
}

struct Progress {
    every: u64,
    total: u64,
}

impl TrainHook for Progress {
    fn after_step(&mut self, step: u64, task: usize, loss: f64, _params: &ModelParams) {
        if step % self.every == 0 || step == self.total {
            log::info!("step {step}/{} task {task} loss {loss:.5}", self.total);
        }
    }
}

/// Trains from a run config; returns the checkpoint path and the loss trace.
pub fn cmd_train(config_path: &Path) -> AppResult<(PathBuf, LossTrace)> {
    let config = RunConfig::load(config_path)?;
    let model = config.require_model(config_path, "train")?.clone();
    let schedule = config.schedule.build()?;
    let data = config.data.load_tasks(Split::Train, config.seed)?;
    if model.conditioning != Conditioning::Unconditional && data.len() != model.n_tasks {
        return Err(AppError::Config {
            path: config_path.to_path_buf(),
            message: format!("data yields {} tasks, model has {}", data.len(), model.n_tasks),
        });
    }
    let unet = Unet::new(&model)?;
    let mut params = init_model(&model, config.seed)?;
    let mut opt = OptimizerState::new();
    let total: usize = data.iter().map(|t| t.len()).sum();
    let steps = config.train.total_steps(total) as u64;
    log::info!(
        "training {} on {} tasks of {} ({} parameters, {steps} steps)",
        model.conditioning.method_name(),
        data.len(),
        config.data.kind.label(),
        params.parameter_count()
    );
    let mut hook = Progress {
        every: (steps / 20).max(1),
        total: steps,
    };
    let trace = train_with_hook(&unet, &mut params, &mut opt, &data, &config.train, &schedule, &mut hook)?;

    create_dir(&config.output_dir)?;
    let ckpt_path = config.output_dir.join(CHECKPOINT_DIR);
    let ckpt = Checkpoint {
        model,
        schedule: config.schedule,
        step: trace.len() as u64,
        lineage: vec![LineageEntry {
            stage: "train".into(),
            init_seed: config.seed,
            data_seed: config.seed,
            train_seed: config.train.seed,
            steps: trace.len() as u64,
        }],
        params,
        optimizer: Some(opt),
    };
    save_checkpoint(&ckpt, &ckpt_path)?;
    write_file(&config.output_dir.join(LOSS_CSV), &trace.to_csv())?;
    log::info!("wrote {}", ckpt_path.display());
    Ok((ckpt_path, trace))
}

fn eval_model<'a>(ckpt: &'a Checkpoint, unet: &'a Unet, schedule: &'a srddpm_core::diffusion::NoiseSchedule) -> EvalModel<'a> {
    EvalModel {
        method: ckpt.model.conditioning.method_name().to_string(),
        unet,
        params: &ckpt.params,
        schedule,
    }
}

/// Task ids to draw from, with `0` standing for an unconditional model.
fn resolve_tasks(ckpt: &Checkpoint, task: TaskSelection) -> AppResult<Vec<usize>> {
    let n = ckpt.model.n_tasks;
    match (ckpt.model.conditioning, task) {
        (Conditioning::Unconditional, TaskSelection::All) => Ok(vec![0]),
        (Conditioning::Unconditional, TaskSelection::One(t)) => Err(AppError::Usage(format!(
            "unconditional checkpoint has no task {t}; use --task all"
        ))),
        (_, TaskSelection::All) => Ok((1..=n).collect()),
        (_, TaskSelection::One(t)) if (1..=n).contains(&t) => Ok(vec![t]),
        (_, TaskSelection::One(t)) => Err(AppError::Usage(format!("task {t} outside [1, {n}]"))),
    }
}

fn task_label(task: usize) -> String {
    if task == 0 {
        "unconditional".into()
    } else {
        format!("task_{task}")
    }
}

/// Writes `count` samples per task plus a one-row grid per task.
pub fn cmd_sample(ckpt_path: &Path, task: TaskSelection, count: usize, seed: u64, out: &Path) -> AppResult<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let tasks = resolve_tasks(&ckpt, task)?;
    if count == 0 {
        return Err(AppError::Usage("count must be positive".into()));
    }
    let unet = Unet::new(&ckpt.model)?;
    let schedule = ckpt.schedule.build()?;
    let model = eval_model(&ckpt, &unet, &schedule);
    let jobs: Vec<(usize, u64)> = tasks.iter().flat_map(|&t| (0..count as u64).map(move |k| (t, k))).collect();
    let samples: Vec<ImageTensor> = jobs
        .par_iter()
        .map(|&(t, k)| model.generate(t, seed, k))
        .collect::<Result<_, _>>()?;
    for (i, &t) in tasks.iter().enumerate() {
        let row = &samples[i * count..(i + 1) * count];
        let dir = out.join(task_label(t));
        create_dir(&dir)?;
        for (k, s) in row.iter().enumerate() {
            Raster::from_image(s).save(&dir.join(format!("sample_{k:03}.png")))?;
        }
        Raster::strip(row).save(&out.join(format!("{}_grid.png", task_label(t))))?;
    }
    log::info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

/// Evaluates every checkpoint on the configured test split.
pub fn cmd_eval(ckpt_paths: &[PathBuf], config_path: &Path) -> AppResult<MetricsReport> {
    if ckpt_paths.is_empty() {
        return Err(AppError::Usage("at least one --ckpt is required".into()));
    }
    let config = RunConfig::load(config_path)?;
    let test = config.data.load_tasks(Split::Test, config.seed)?;
    let dataset = EvalDataset {
        name: config.data.kind.label().to_string(),
        tasks: &test,
    };
    let mut report = MetricsReport::default();
    for path in ckpt_paths {
        let ckpt = load_checkpoint(path)?;
        if ckpt.model.image_shape() != config.data.image_shape() {
            return Err(AppError::Usage(format!(
                "{} expects {} images, {} data gives {}",
                path.display(),
                ckpt.model.image_shape(),
                dataset.name,
                config.data.image_shape()
            )));
        }
        if ckpt.model.conditioning != Conditioning::Unconditional && ckpt.model.n_tasks != test.len() {
            return Err(AppError::Usage(format!(
                "{} has {} tasks, test split has {}",
                path.display(),
                ckpt.model.n_tasks,
                test.len()
            )));
        }
        let unet = Unet::new(&ckpt.model)?;
        let schedule = ckpt.schedule.build()?;
        let model = eval_model(&ckpt, &unet, &schedule);
        let part = evaluate(
            &model,
            std::slice::from_ref(&dataset),
            &config.metrics.eval_config(),
            &FeatureExtractor::PixelPool,
        )?;
        report.rows.extend(part.rows);
    }
    create_dir(&config.output_dir)?;
    write_file(&config.output_dir.join(REPORT_CSV), &report.to_csv())?;
    write_file(&config.output_dir.join(REPORT_TXT), &report.to_table())?;
    Ok(report)
}

/// Fine-tunes a new task into a copy of the checkpoint; returns its path.
pub fn cmd_add_task(ckpt_path: &Path, config_path: &Path) -> AppResult<PathBuf> {
    let config = RunConfig::load(config_path)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    if ckpt.model.conditioning != Conditioning::SharedRepresentation {
        return Err(AppError::Usage(format!(
            "add-task needs an SR-DDPM checkpoint, {} is {}",
            ckpt_path.display(),
            ckpt.model.conditioning.method_name()
        )));
    }
    if config.data.classes.as_ref().map(Vec::len) != Some(1) {
        return Err(AppError::Config {
            path: config_path.to_path_buf(),
            message: "add-task needs exactly one entry in data.classes".into(),
        });
    }
    if config.data.image_shape() != ckpt.model.image_shape() {
        return Err(AppError::Usage(format!(
            "checkpoint expects {} images, data gives {}",
            ckpt.model.image_shape(),
            config.data.image_shape()
        )));
    }
    let out_path = config.output_dir.join(CHECKPOINT_DIR);
    let same = match (fs::canonicalize(ckpt_path), fs::canonicalize(&out_path)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err(AppError::Usage("add-task would overwrite its input checkpoint".into()));
    }
    let data = config.data.load_tasks(Split::Train, config.seed)?;
    let schedule = ckpt.schedule.build()?;
    let (params, model, trace) = fine_tune_new_task(&ckpt.params, &ckpt.model, &data[0], &config.train, &schedule)?;
    log::info!(
        "task {}: loss {:.5} -> {:.5} over {} steps",
        model.n_tasks,
        trace.head_mean(20),
        trace.tail_mean(20),
        trace.len()
    );
    let mut lineage = ckpt.lineage.clone();
    lineage.push(LineageEntry {
        stage: "add-task".into(),
        init_seed: config.train.seed,
        data_seed: config.seed,
        train_seed: config.train.seed,
        steps: trace.len() as u64,
    });
    let new = Checkpoint {
        model,
        schedule: ckpt.schedule,
        step: ckpt.step + trace.len() as u64,
        lineage,
        params,
        optimizer: ckpt.optimizer,
    };
    create_dir(&config.output_dir)?;
    save_checkpoint(&new, &out_path)?;
    write_file(&config.output_dir.join(LOSS_CSV), &trace.to_csv())?;
    Ok(out_path)
}

/// Runs one chain and saves `x_t` for `t = T, T - stride, ..., 0` as a strip.
/// Returns the number of panels.
pub fn cmd_trace(ckpt_path: &Path, task: Option<usize>, seed: u64, stride: usize, out: &Path) -> AppResult<usize> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let schedule = ckpt.schedule.build()?;
    let steps = schedule.steps();
    if stride == 0 || stride > steps {
        return Err(AppError::Usage(format!("stride must be in [1, {steps}], got {stride}")));
    }
    let selection = match task {
        Some(t) => TaskSelection::One(t),
        None if ckpt.model.conditioning == Conditioning::Unconditional => TaskSelection::All,
        None => return Err(AppError::Usage("--task is required for a conditional checkpoint".into())),
    };
    let task = resolve_tasks(&ckpt, selection)?[0];
    let unet = Unet::new(&ckpt.model)?;
    let den = Denoiser::new(&unet, &ckpt.params, (task > 0).then_some(task))?;
    let mut rng = seeded(seed.wrapping_add(task as u64), 0);
    let x_t = ImageTensor::randn(ckpt.model.image_shape(), &mut rng);
    let mut panels = Vec::new();
    reverse_from(x_t, steps, |x, t| den.predict(x, t), &schedule, &mut rng, |t, x| {
        if (steps - t) % stride == 0 || t == 0 {
            panels.push(x.clone());
        }
    })?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    Raster::strip(&panels).save(out)?;
    Ok(panels.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_selection_parsing() {
        assert_eq!("all".parse::<TaskSelection>().unwrap(), TaskSelection::All);
        assert_eq!("3".parse::<TaskSelection>().unwrap(), TaskSelection::One(3));
        assert!("x".parse::<TaskSelection>().is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["srddpm"]), ExitStatus::Usage);
        assert_eq!(run(["srddpm", "eval", "--config", "x.toml"]), ExitStatus::Usage);
        assert_eq!(run(["srddpm", "frobnicate"]), ExitStatus::Usage);
    }
}
