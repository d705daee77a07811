use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor_io::TensorStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Content,
    Style,
    Target,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Content => "content",
            Branch::Style => "style",
            Branch::Target => "target",
        })
    }
}

/// A latent tensor `(channels, height, width)` tagged with its sample index
/// and the branch that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    data: Array3<f32>,
    step: usize,
    branch: Branch,
}

impl Latent {
    pub fn new(data: Array3<f32>, step: usize, branch: Branch) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("{branch} latent at step {step} holds non-finite value {bad}")));
        }
        Ok(Self { data, step, branch })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.data.dim();
        [c, h, w]
    }
}

/// Per-branch sequence of latents indexed by sample step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    branch: Branch,
    latents: BTreeMap<usize, Latent>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryMeta {
    branch: Branch,
    timesteps: Vec<usize>,
    shape: [usize; 3],
    schedule_hash: String,
}

impl LatentTrajectory {
    pub fn new(branch: Branch) -> Self {
        Self { branch, latents: BTreeMap::new() }
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn insert(&mut self, latent: Latent) -> Result<()> {
        if latent.branch != self.branch {
            return Err(Error::Config(format!(
                "{} latent cannot join a {} trajectory",
                latent.branch, self.branch
            )));
        }
        if self.latents.contains_key(&latent.step) {
            return Err(Error::Config(format!("duplicate step {} in trajectory", latent.step)));
        }
        self.latents.insert(latent.step, latent);
        Ok(())
    }

    pub fn get(&self, step: usize) -> Option<&Latent> {
        self.latents.get(&step)
    }

    pub fn require(&self, step: usize) -> Result<&Latent> {
        self.get(step).ok_or(Error::MissingStep { step })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.latents.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Latent> {
        self.latents.values()
    }

    /// Copy of the entries whose step lies in `lo..=hi`.
    pub fn slice(&self, lo: usize, hi: usize) -> Self {
        Self {
            branch: self.branch,
            latents: self.latents.range(lo..=hi).map(|(k, v)| (*k, v.clone())).collect(),
        }
    }

    pub fn save(&self, dir: &Path, schedule: &NoiseSchedule) -> Result<()> {
        let mut store = TensorStore::new();
        for (step, lat) in &self.latents {
            store.insert(format!("t{step:04}"), lat.data.clone().into_dyn());
        }
        let shape = self.latents.values().next().map(|l| l.shape()).unwrap_or([0; 3]);
        let meta = TrajectoryMeta {
            branch: self.branch,
            timesteps: self.latents.keys().copied().collect(),
            shape,
            schedule_hash: schedule.fingerprint(),
        };
        store.save(dir, "latent_trajectory", serde_json::to_value(meta)?)?;
        Ok(())
    }

    /// Loads a dump; the manifest's schedule hash must match `schedule`.
    pub fn load(dir: &Path, schedule: &NoiseSchedule) -> Result<Self> {
        let (mut store, manifest) = TensorStore::load(dir)?;
        let meta: TrajectoryMeta = serde_json::from_value(manifest.meta)?;
        if meta.schedule_hash != schedule.fingerprint() {
            return Err(Error::Config("trajectory was produced under a different schedule".into()));
        }
        let mut traj = Self::new(meta.branch);
        for step in meta.timesteps {
            let t = store.take(&format!("t{step:04}"))?;
            let data = t.into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?;
            traj.insert(Latent::new(data, step, meta.branch)?)?;
        }
        Ok(traj)
    }
}
