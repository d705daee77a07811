//! Noise schedule: β/ᾱ tables over the training timesteps and the map from
//! inference sample indices to training timesteps.
//!
//! Sample indices run `0..=T`. Index `0` is the clean latent (ᾱ = 1); index
//! `t ∈ 1..=T` denotes training timestep `timestep_map[t - 1]`. The map uses
//! even "leading" spacing: `timestep_map[k] = k * T_train / T`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpacing {
    Linear,
    #[default]
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub spacing: BetaSpacing,
}

impl Default for ScheduleConfig {
    /// Stable-Diffusion-style betas with 50 sampling steps.
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            sample_steps: 50,
            spacing: BetaSpacing::ScaledLinear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(
            self.train_steps,
            self.beta_start,
            self.beta_end,
            self.sample_steps,
            self.spacing,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    train_steps: usize,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
    timestep_map: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        sample_steps: usize,
        spacing: BetaSpacing,
    ) -> Result<Self> {
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        if train_steps == 0 || sample_steps == 0 || sample_steps > train_steps {
            return Err(Error::Config(format!(
                "need 1 <= sample_steps ({sample_steps}) <= train_steps ({train_steps})"
            )));
        }

        let lerp = |a: f64, b: f64, i: usize| {
            if train_steps == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (train_steps - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| match spacing {
                BetaSpacing::Linear => lerp(beta_start, beta_end, i),
                BetaSpacing::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
            })
            .collect();

        let alphas_cumprod = betas
            .iter()
            .scan(1.0f64, |prod, b| {
                *prod *= 1.0 - b;
                Some(*prod)
            })
            .collect();

        let timestep_map = (0..sample_steps).map(|k| k * train_steps / sample_steps).collect();

        Ok(Self { train_steps, betas, alphas_cumprod, timestep_map })
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    /// Number of inference steps `T`.
    pub fn sample_steps(&self) -> usize {
        self.timestep_map.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ over training timesteps; `alphas_cumprod()[k]` is the product of
    /// `1 - β` over the first `k + 1` betas.
    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn timestep_map(&self) -> &[usize] {
        &self.timestep_map
    }

    /// Training timestep fed to the denoiser at sample index `t ∈ 1..=T`.
    pub fn train_timestep(&self, t: usize) -> Result<usize> {
        self.check_step(t)?;
        if t == 0 {
            return Err(Error::Config("sample index 0 has no training timestep".into()));
        }
        Ok(self.timestep_map[t - 1])
    }

    /// ᾱ at sample index `t ∈ 0..=T`; `t = 0` is defined as 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(if t == 0 { 1.0 } else { self.alphas_cumprod[self.timestep_map[t - 1]] })
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.sample_steps() {
            return Err(Error::Config(format!(
                "sample index {t} outside 0..={}",
                self.sample_steps()
            )));
        }
        Ok(())
    }

    /// Stable fingerprint of the schedule, recorded in dump manifests.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.train_steps as u64).to_le_bytes());
        for b in &self.betas {
            h.update(b.to_le_bytes());
        }
        for t in &self.timestep_map {
            h.update((*t as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
