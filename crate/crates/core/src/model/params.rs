use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::unet::{Init, SlotSpec, Unet};
use crate::rng::{seeded, Rng};
use crate::{Error, Result};

/// Whether a layer's tensors are shared by every task or copied per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    Shared,
    Exclusive,
}

/// A dense `f32` parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(&shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

type Collection = BTreeMap<String, Tensor>;

/// Shared tensors plus one exclusive collection per task.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shared: Collection,
    exclusive: Vec<Collection>,
    routing: BTreeMap<String, Route>,
}

/// Tensor names on each side of the shared / exclusive split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub shared: Vec<String>,
    pub per_task: Vec<Vec<String>>,
}

/// Tensor names on each side of the split, one exclusive list per task.
pub fn parameter_partition(params: &ModelParams) -> Partition {
    Partition {
        shared: params.shared.keys().cloned().collect(),
        per_task: params
            .exclusive
            .iter()
            .map(|c| c.keys().cloned().collect())
            .collect(),
    }
}

fn draw(init: Init, len: usize, rng: &mut Rng) -> Vec<f32> {
    match init {
        Init::Zeros => vec![0.0; len],
        Init::Ones => vec![1.0; len],
        Init::Normal(std) => truncated_normal(len, std, rng),
        Init::FanIn(fan) => truncated_normal(len, 1.0 / (fan as f64).sqrt(), rng),
    }
}

/// Normal draws rejected outside two standard deviations.
fn truncated_normal(len: usize, std: f64, rng: &mut Rng) -> Vec<f32> {
    (0..len)
        .map(|_| loop {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            if z.abs() <= 2.0 {
                break (z * std) as f32;
            }
        })
        .collect()
}

fn init_collection<'a>(slots: impl Iterator<Item = &'a SlotSpec>, rng: &mut Rng) -> Collection {
    slots
        .map(|s| {
            let data = draw(s.init, s.len(), rng);
            (s.name.clone(), Tensor::new(s.shape.clone(), data).expect("slot shape"))
        })
        .collect()
}

/// Freshly initialised exclusive collection for task `task` (1-based).
///
/// Each task draws from its own stream of `seed`, so appending a task later
/// reproduces exactly what `init_model` would have produced for it.
pub(crate) fn init_exclusive(unet: &Unet, seed: u64, task: usize) -> Collection {
    let mut rng = seeded(seed, task as u64);
    init_collection(
        unet.slots().iter().filter(|s| s.route == Route::Exclusive),
        &mut rng,
    )
}

/// Initialises every tensor of the model deterministically from `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let unet = Unet::new(config)?;
    let mut rng = seeded(seed, 0);
    let shared = init_collection(
        unet.slots().iter().filter(|s| s.route == Route::Shared),
        &mut rng,
    );
    let exclusive = (1..=config.exclusive_copies())
        .map(|task| init_exclusive(&unet, seed, task))
        .collect();
    let routing = unet
        .slots()
        .iter()
        .map(|s| (s.name.clone(), s.route))
        .collect();
    Ok(ModelParams {
        shared,
        exclusive,
        routing,
    })
}

impl ModelParams {
    /// Assembles parameters from parts, checking them against `unet`.
    pub fn from_parts(unet: &Unet, shared: Collection, exclusive: Vec<Collection>) -> Result<Self> {
        let routing = unet
            .slots()
            .iter()
            .map(|s| (s.name.clone(), s.route))
            .collect();
        let params = Self {
            shared,
            exclusive,
            routing,
        };
        params.validate(unet)?;
        Ok(params)
    }

    /// Checks the partition property, shapes and finiteness against `unet`.
    pub fn validate(&self, unet: &Unet) -> Result<()> {
        let expected_copies = unet.config().exclusive_copies();
        if self.exclusive.len() != expected_copies {
            return Err(Error::Config(format!(
                "expected {expected_copies} exclusive collections, found {}",
                self.exclusive.len()
            )));
        }
        let check = |coll: &Collection, route: Route, label: &str| -> Result<()> {
            let wanted: Vec<&SlotSpec> = unet.slots().iter().filter(|s| s.route == route).collect();
            if coll.len() != wanted.len() {
                return Err(Error::Config(format!(
                    "{label}: expected {} tensors, found {}",
                    wanted.len(),
                    coll.len()
                )));
            }
            for slot in wanted {
                let t = coll.get(&slot.name).ok_or_else(|| {
                    Error::Config(format!("{label}: missing tensor {}", slot.name))
                })?;
                if t.shape != slot.shape {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{label}/{} {:?}", slot.name, slot.shape),
                        actual: format!("{:?}", t.shape),
                    });
                }
                if t.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("{label}/{}", slot.name)));
                }
            }
            Ok(())
        };
        check(&self.shared, Route::Shared, "shared")?;
        for (i, coll) in self.exclusive.iter().enumerate() {
            check(coll, Route::Exclusive, &format!("task_{}", i + 1))?;
        }
        Ok(())
    }

    pub fn shared(&self) -> &Collection {
        &self.shared
    }

    pub fn shared_mut(&mut self) -> &mut Collection {
        &mut self.shared
    }

    /// Exclusive collection of `task` (1-based).
    pub fn exclusive(&self, task: usize) -> Option<&Collection> {
        task.checked_sub(1).and_then(|i| self.exclusive.get(i))
    }

    pub fn exclusive_mut(&mut self, task: usize) -> Option<&mut Collection> {
        task.checked_sub(1).and_then(|i| self.exclusive.get_mut(i))
    }

    pub fn exclusive_collections(&self) -> &[Collection] {
        &self.exclusive
    }

    pub fn n_exclusive(&self) -> usize {
        self.exclusive.len()
    }

    pub fn routing(&self) -> &BTreeMap<String, Route> {
        &self.routing
    }

    pub(crate) fn push_exclusive(&mut self, coll: Collection) {
        self.exclusive.push(coll);
    }

    /// Looks up `name` for `task`, following the routing table.
    pub fn tensor(&self, name: &str, task: Option<usize>) -> Option<&Tensor> {
        match self.routing.get(name)? {
            Route::Shared => self.shared.get(name),
            Route::Exclusive => self.exclusive(task?)?.get(name),
        }
    }

    /// Weight slices in `unet` slot order, resolving exclusive slots to
    /// `task`'s collection.
    pub fn weights<'a>(&'a self, unet: &Unet, task: Option<usize>) -> Result<Vec<&'a [f32]>> {
        unet.slots()
            .iter()
            .map(|slot| {
                let t = match slot.route {
                    Route::Shared => self.shared.get(&slot.name),
                    Route::Exclusive => {
                        let task = task.ok_or_else(|| {
                            Error::Task("shared-representation model needs a task id".into())
                        })?;
                        let coll = self.exclusive(task).ok_or_else(|| {
                            Error::Task(format!(
                                "task {task} outside [1, {}]",
                                self.exclusive.len()
                            ))
                        })?;
                        coll.get(&slot.name)
                    }
                }
                .ok_or_else(|| Error::Config(format!("missing tensor {}", slot.name)))?;
                if t.len() != slot.len() {
                    return Err(Error::shape(&slot.shape, t.shape()));
                }
                Ok(t.data())
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.shared.values().map(Tensor::len).sum::<usize>()
            + self
                .exclusive
                .iter()
                .flat_map(|c| c.values())
                .map(Tensor::len)
                .sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::model::{Conditioning, StagePosition};

    fn config(conditioning: Conditioning, n_tasks: usize) -> ModelConfig {
        let exclusive_stages = if conditioning == Conditioning::SharedRepresentation {
            [StagePosition::First, StagePosition::Last].into()
        } else {
            BTreeSet::new()
        };
        ModelConfig {
            image_channels: 1,
            image_size: 8,
            base_channels: 4,
            n_stages: 2,
            n_tasks,
            exclusive_stages,
            conditioning,
            time_embed_dim: 8,
        }
    }

    #[test]
    fn unconditional_has_no_exclusive_side() {
        let p = init_model(&config(Conditioning::Unconditional, 0), 1).unwrap();
        let part = parameter_partition(&p);
        assert!(part.per_task.is_empty());
        assert!(p.routing().values().all(|r| *r == Route::Shared));
        assert_eq!(part.shared.len(), p.routing().len());
    }

    #[test]
    fn shared_representation_partition() {
        let cfg = ModelConfig {
            n_tasks: 10,
            ..config(Conditioning::SharedRepresentation, 10)
        };
        let p = init_model(&cfg, 3).unwrap();
        let part = parameter_partition(&p);
        assert_eq!(part.per_task.len(), 10);
        for names in &part.per_task {
            assert_eq!(names, &part.per_task[0]);
            assert!(names
                .iter()
                .all(|n| n.starts_with("enc0.") || n.starts_with("dec0.")));
        }
        assert!(part.per_task[0].iter().any(|n| n.starts_with("enc0.")));
        assert!(part.per_task[0].iter().any(|n| n.starts_with("dec0.")));
        assert!(part.shared.iter().all(|n| !n.starts_with("enc0.") && !n.starts_with("dec0.")));
        for i in 1..10 {
            for (name, t) in p.exclusive(1).unwrap() {
                assert_eq!(t.shape(), p.exclusive(i + 1).unwrap()[name].shape());
            }
        }
        // Independently initialised copies.
        assert_ne!(
            p.exclusive(1).unwrap()["enc0.block0.conv.weight"],
            p.exclusive(2).unwrap()["enc0.block0.conv.weight"]
        );
    }

    #[test]
    fn partition_covers_every_tensor_once() {
        let p = init_model(&config(Conditioning::SharedRepresentation, 3), 5).unwrap();
        let part = parameter_partition(&p);
        let shared: BTreeSet<_> = part.shared.iter().collect();
        let excl: BTreeSet<_> = part.per_task[0].iter().collect();
        assert!(shared.is_disjoint(&excl));
        let all: BTreeSet<_> = p.routing().keys().collect();
        let union: BTreeSet<_> = shared.union(&excl).copied().collect();
        assert_eq!(union, all);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = config(Conditioning::ClassConditional, 4);
        assert_eq!(init_model(&cfg, 9).unwrap(), init_model(&cfg, 9).unwrap());
        assert_ne!(init_model(&cfg, 9).unwrap(), init_model(&cfg, 10).unwrap());
    }

    #[test]
    fn output_layer_starts_at_zero() {
        let p = init_model(&config(Conditioning::Unconditional, 0), 1).unwrap();
        assert!(p.shared()["dec0.out.weight"].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn truncated_init_respects_bound() {
        let p = init_model(&config(Conditioning::Unconditional, 0), 2).unwrap();
        let w = &p.shared()["enc1.block0.conv.weight"];
        let std = 1.0 / ((4 * 9) as f32).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= 2.0 * std + 1e-6));
    }

    #[test]
    fn validate_detects_missing_tensor() {
        let cfg = config(Conditioning::SharedRepresentation, 2);
        let unet = Unet::new(&cfg).unwrap();
        let mut p = init_model(&cfg, 1).unwrap();
        p.exclusive_mut(2).unwrap().remove("dec0.out.bias");
        assert!(p.validate(&unet).is_err());
    }
}
