//! Deterministic (η = 0) DDIM arithmetic over sample indices of a
//! [`NoiseSchedule`].

use ndarray::{Array2, Array3, Zip};

use crate::denoiser::{DenoiserBackend, InjectionDirective};
use crate::error::{Error, Result};
use crate::latent::{Latent, LatentTrajectory};
use crate::schedule::NoiseSchedule;

fn same_shape(a: &Array3<f32>, b: &Array3<f32>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `√ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
pub fn add_noise(z0: &Array3<f32>, eps: &Array3<f32>, t: usize, s: &NoiseSchedule) -> Result<Array3<f32>> {
    same_shape(z0, eps, "add_noise")?;
    let ab = s.alpha_bar(t)?;
    Ok(affine(z0, eps, ab.sqrt(), (1.0 - ab).sqrt()))
}

/// One reverse DDIM step from sample index `t` down to `t_prev`.
pub fn ddim_step(z_t: &Array3<f32>, eps: &Array3<f32>, t: usize, t_prev: usize, s: &NoiseSchedule) -> Result<Array3<f32>> {
    if t_prev >= t {
        return Err(Error::Ordering(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    same_shape(z_t, eps, "ddim_step")?;
    let (a_t, a_p) = (s.alpha_bar(t)?, s.alpha_bar(t_prev)?);
    // z_prev = √ᾱ_p · (z − √(1−ᾱ_t)·eps)/√ᾱ_t + √(1−ᾱ_p)·eps
    let cz = (a_p / a_t).sqrt();
    let ce = (1.0 - a_p).sqrt() - (a_p / a_t).sqrt() * (1.0 - a_t).sqrt();
    Ok(affine(z_t, eps, cz, ce))
}

/// One DDIM inversion step from sample index `t` up to `t_next`.
pub fn ddim_invert_step(
    z_t: &Array3<f32>,
    eps: &Array3<f32>,
    t: usize,
    t_next: usize,
    s: &NoiseSchedule,
) -> Result<Array3<f32>> {
    if t_next <= t {
        return Err(Error::Ordering(format!("ddim_invert_step needs t_next > t, got {t_next} <= {t}")));
    }
    same_shape(z_t, eps, "ddim_invert_step")?;
    let (a_t, a_n) = (s.alpha_bar(t)?, s.alpha_bar(t_next)?);
    let cz = (a_n / a_t).sqrt();
    let ce = a_n.sqrt() * ((1.0 / a_n - 1.0).sqrt() - (1.0 / a_t - 1.0).sqrt());
    Ok(affine(z_t, eps, cz, ce))
}

/// Classifier-free guidance: `uncond + scale · (cond − uncond)`.
pub fn cfg_combine(uncond: &Array3<f32>, cond: &Array3<f32>, scale: f32) -> Result<Array3<f32>> {
    same_shape(uncond, cond, "cfg_combine")?;
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    Ok(Zip::from(uncond).and(cond).map_collect(|u, c| u + scale * (c - u)))
}

fn affine(a: &Array3<f32>, b: &Array3<f32>, ca: f64, cb: f64) -> Array3<f32> {
    Zip::from(a).and(b).map_collect(|x, y| (ca * *x as f64 + cb * *y as f64) as f32)
}

/// DDIM-inverts `z0` and keeps the latents for sample steps `t_lo..=t_hi`.
///
/// The chain always starts from `z0`, so the backend runs `t_hi` times (one
/// evaluation per step, at the current latent and the target timestep).
/// `t_lo > t_hi` yields an empty trajectory without touching the backend.
pub fn invert_trajectory(
    z0: &Latent,
    t_lo: usize,
    t_hi: usize,
    backend: &dyn DenoiserBackend,
    cond: &Array2<f32>,
    s: &NoiseSchedule,
) -> Result<LatentTrajectory> {
    let mut traj = LatentTrajectory::new(z0.branch());
    if t_lo > t_hi {
        return Ok(traj);
    }
    if t_lo == 0 || t_hi > s.sample_steps() {
        return Err(Error::Config(format!(
            "inversion range {t_lo}..={t_hi} outside 1..={}",
            s.sample_steps()
        )));
    }
    extend_inversion(&mut traj, z0, t_lo, t_hi, backend, cond, s)?;
    Ok(traj)
}

/// Continues an inversion chain. `start` is the latent at its own step; the
/// latents for steps in `keep_from..=t_hi` are inserted into `traj`.
pub fn extend_inversion(
    traj: &mut LatentTrajectory,
    start: &Latent,
    keep_from: usize,
    t_hi: usize,
    backend: &dyn DenoiserBackend,
    cond: &Array2<f32>,
    s: &NoiseSchedule,
) -> Result<()> {
    let none = InjectionDirective::none();
    let mut z = start.data().clone();
    for t in start.step() + 1..=t_hi {
        let pred = backend
            .predict_noise(&z, s.train_timestep(t)?, cond, &none, false)
            .map_err(|e| e.at_stage("inversion", t))?;
        z = ddim_invert_step(&z, &pred.eps, t - 1, t, s)?;
        if t >= keep_from {
            traj.insert(Latent::new(z.clone(), t, start.branch()).map_err(|e| e.at_stage("inversion", t))?)?;
        }
    }
    Ok(())
}
