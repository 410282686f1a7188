use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which reverse-process variance to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// `sigma_t^2 = beta_t`.
    #[default]
    Beta,
    /// `sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    BetaTilde,
}

/// Per-step variance tables. Stored in `f64` so the cumulative product stays
/// accurate over hundreds of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma_mode: SigmaMode,
}

/// Builds a schedule whose betas interpolate linearly from `beta_start` at
/// `t = 1` to `beta_end` at `t = steps`.
pub fn build_linear_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    sigma_mode: SigmaMode,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Domain("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Domain(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (i as f64) / ((steps - 1) as f64) * (beta_end - beta_start)
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas, sigma_mode)
}

impl NoiseSchedule {
    /// Builds a schedule from an explicit beta table (`betas[0]` is step 1).
    pub fn from_betas(betas: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Domain(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigma_mode,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    /// Cumulative product up to `t`. `t = 0` is accepted and yields 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Reverse-process variance `sigma_t^2` under the configured mode.
    pub fn posterior_sigma2(&self, t: usize) -> Result<f64> {
        let beta = self.beta(t)?;
        Ok(match self.sigma_mode {
            SigmaMode::Beta => beta,
            SigmaMode::BetaTilde => {
                let prev = self.alpha_bar(t - 1)?;
                let cur = self.alpha_bar(t)?;
                (1.0 - prev) / (1.0 - cur) * beta
            }
        })
    }
}
