use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;

use crate::diffusion::{diffuse, ImageTensor, NoiseSchedule};
use crate::model::{BatchItem, Conditioning, ModelConfig, ModelParams, Route, Unet};
use crate::rng::seeded;
use crate::Result;

/// Settings for [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Relative error a coordinate must stay under.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is essentially zero are judged on absolute error.
    pub denominator_floor: f64,
    /// Coordinates sampled per tensor (all of them if the tensor is smaller).
    pub coords_per_tensor: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Tasks to evaluate; `None` checks every task the model has.
    pub tasks: Option<Vec<usize>>,
    /// Uses the model's own prediction as the target noise, a zero-loss point.
    pub zero_residual: bool,
    /// Negates the analytic gradient of the named tensor (negative control).
    #[doc(hidden)]
    pub corrupt_tensor: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            denominator_floor: 1e-8,
            coords_per_tensor: 200,
            batch_size: 2,
            seed: 0,
            tasks: None,
            zero_residual: false,
            corrupt_tensor: None,
        }
    }
}

/// Agreement statistics for one tensor group (`shared` or `task_<i>`).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    pub within_tolerance: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub worst_tensor: String,
}

impl GroupReport {
    pub fn fraction_within(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within_tolerance as f64 / self.checked as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn fraction_within(&self) -> f64 {
        let checked = self.checked();
        if checked == 0 {
            return 1.0;
        }
        self.groups.iter().map(|g| g.within_tolerance).sum::<usize>() as f64 / checked as f64
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_abs_analytic(&self) -> f64 {
        self.groups.iter().map(|g| g.max_abs_analytic).fold(0.0, f64::max)
    }

    pub fn max_abs_numeric(&self) -> f64 {
        self.groups.iter().map(|g| g.max_abs_numeric).fold(0.0, f64::max)
    }

    /// Every group keeps at least `min_fraction` of its coordinates in tolerance.
    pub fn passes(&self, min_fraction: f64) -> bool {
        self.groups.iter().all(|g| g.fraction_within() >= min_fraction)
    }
}

fn group_entry<'a>(groups: &'a mut Vec<GroupReport>, name: &str) -> &'a mut GroupReport {
    if let Some(i) = groups.iter().position(|g| g.group == name) {
        return &mut groups[i];
    }
    groups.push(GroupReport {
        group: name.to_string(),
        checked: 0,
        within_tolerance: 0,
        max_rel_error: 0.0,
        max_abs_analytic: 0.0,
        max_abs_numeric: 0.0,
        worst_tensor: String::new(),
    });
    groups.last_mut().expect("just pushed")
}

/// Compares analytic gradients of the noise-prediction loss with central
/// finite differences, both evaluated in `f64`.
pub fn gradient_check(
    params: &ModelParams,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let unet = Unet::new(config)?;
    params.validate(&unet)?;
    let tasks: Vec<Option<usize>> = match (&options.tasks, config.conditioning) {
        (_, Conditioning::Unconditional) => vec![None],
        (Some(t), _) => t.iter().map(|t| Some(*t)).collect(),
        (None, _) => (1..=config.n_tasks).map(Some).collect(),
    };
    let shape = config.image_shape();
    let mut rng = seeded(options.seed, 0x9c);
    let mut groups = Vec::new();

    for task in tasks {
        let class = unet.class_index(task)?;
        let weights: Vec<Vec<f64>> = params
            .weights(&unet, task)?
            .into_iter()
            .map(|w| w.iter().map(|v| *v as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = weights.iter().map(Vec::as_slice).collect();

        let mut items = Vec::with_capacity(options.batch_size);
        for _ in 0..options.batch_size {
            let x0_data = (0..shape.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let x0 = ImageTensor::new(shape, x0_data)?;
            let eps = ImageTensor::randn(shape, &mut rng);
            let t = rng.random_range(1..=schedule.steps());
            let x_t: Vec<f64> = diffuse(&x0, t, &eps, schedule)?
                .data()
                .iter()
                .map(|v| *v as f64)
                .collect();
            let eps = if options.zero_residual {
                unet.predict(&refs, &x_t, t, class)
            } else {
                eps.data().iter().map(|v| *v as f64).collect()
            };
            items.push(BatchItem { x_t, t, eps });
        }

        let (_, mut analytic) = unet.loss_and_grad(&refs, &items, class);
        if let Some(name) = &options.corrupt_tensor {
            if let Some(i) = unet.slots().iter().position(|s| &s.name == name) {
                analytic[i].iter_mut().for_each(|g| *g = -*g);
            }
        }

        for (si, slot) in unet.slots().iter().enumerate() {
            let group = match (slot.route, task) {
                (Route::Exclusive, Some(t)) => format!("task_{t}"),
                _ => "shared".to_string(),
            };
            let n = slot.len().min(options.coords_per_tensor);
            let coords: Vec<usize> = sample(&mut rng, slot.len(), n).into_vec();
            let results: Vec<(f64, f64)> = coords
                .par_iter()
                .map(|&c| {
                    let mut plus = weights[si].clone();
                    plus[c] += options.step;
                    let mut minus = weights[si].clone();
                    minus[c] -= options.step;
                    let mut r = refs.clone();
                    r[si] = &plus;
                    let lp = unet.loss(&r, &items, class);
                    r[si] = &minus;
                    let lm = unet.loss(&r, &items, class);
                    ((lp - lm) / (2.0 * options.step), analytic[si][c])
                })
                .collect();
            let entry = group_entry(&mut groups, &group);
            for (numeric, analytic) in results {
                let denom = numeric.abs().max(analytic.abs()).max(options.denominator_floor);
                let rel = (numeric - analytic).abs() / denom;
                entry.checked += 1;
                if rel <= options.tolerance {
                    entry.within_tolerance += 1;
                }
                if rel > entry.max_rel_error {
                    entry.max_rel_error = rel;
                    entry.worst_tensor = slot.name.clone();
                }
                entry.max_abs_analytic = entry.max_abs_analytic.max(analytic.abs());
                entry.max_abs_numeric = entry.max_abs_numeric.max(numeric.abs());
            }
        }
    }
    Ok(GradCheckReport {
        tolerance: options.tolerance,
        groups,
    })
}
