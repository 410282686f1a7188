use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diffusion::Shape;
use crate::{Error, Result};

/// How the task id reaches the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Plain DDPM, the task id is ignored.
    Unconditional,
    /// A learned per-class vector is added to the timestep embedding.
    ClassConditional,
    /// Selected stages exist once per task; everything else is shared.
    SharedRepresentation,
}

impl Conditioning {
    /// Short method label used in reports.
    pub fn method_name(self) -> &'static str {
        match self {
            Conditioning::Unconditional => "DDPM",
            Conditioning::ClassConditional => "C-DDPM",
            Conditioning::SharedRepresentation => "SR-DDPM",
        }
    }
}

/// Outermost UNet stages that can be made task-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StagePosition {
    /// First encoder stage (full resolution).
    First,
    /// Last decoder stage, including the output convolution.
    Last,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub n_stages: usize,
    pub n_tasks: usize,
    #[serde(default)]
    pub exclusive_stages: BTreeSet<StagePosition>,
    pub conditioning: Conditioning,
    pub time_embed_dim: usize,
}

impl ModelConfig {
    pub fn image_shape(&self) -> Shape {
        Shape::new(self.image_channels, self.image_size, self.image_size)
    }

    /// Channel width of stage `s` (doubling per stage).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_channels == 0 || self.image_size == 0 || self.base_channels == 0 {
            return fail("image_channels, image_size and base_channels must be positive".into());
        }
        if self.n_stages < 2 {
            return fail(format!("n_stages must be at least 2, got {}", self.n_stages));
        }
        let factor = 1usize << (self.n_stages - 1);
        if self.image_size % factor != 0 {
            return fail(format!(
                "image_size {} not divisible by 2^(n_stages-1) = {factor}",
                self.image_size
            ));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return fail(format!(
                "time_embed_dim must be positive and even, got {}",
                self.time_embed_dim
            ));
        }
        let sr = self.conditioning == Conditioning::SharedRepresentation;
        if sr == self.exclusive_stages.is_empty() {
            return fail(
                "exclusive_stages must be non-empty exactly when conditioning is shared-representation"
                    .into(),
            );
        }
        if self.conditioning != Conditioning::Unconditional && self.n_tasks == 0 {
            return fail("conditional models need n_tasks >= 1".into());
        }
        Ok(())
    }

    /// Number of exclusive parameter collections.
    pub fn exclusive_copies(&self) -> usize {
        if self.conditioning == Conditioning::SharedRepresentation {
            self.n_tasks
        } else {
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig {
            image_channels: 1,
            image_size: 16,
            base_channels: 8,
            n_stages: 3,
            n_tasks: 2,
            exclusive_stages: [StagePosition::First, StagePosition::Last].into(),
            conditioning: Conditioning::SharedRepresentation,
            time_embed_dim: 16,
        }
    }

    #[test]
    fn valid_config_passes() {
        base().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_size() {
        let c = ModelConfig {
            image_size: 28,
            n_stages: 4,
            ..base()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn exclusive_stages_iff_shared_representation() {
        let c = ModelConfig {
            conditioning: Conditioning::ClassConditional,
            ..base()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            exclusive_stages: BTreeSet::new(),
            ..base()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            conditioning: Conditioning::Unconditional,
            exclusive_stages: BTreeSet::new(),
            n_tasks: 0,
            ..base()
        };
        c.validate().unwrap();
    }

    #[test]
    fn odd_embedding_rejected() {
        let c = ModelConfig {
            time_embed_dim: 15,
            ..base()
        };
        assert!(c.validate().is_err());
    }
}
