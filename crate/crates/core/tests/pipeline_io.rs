use std::sync::Arc;

use ndarray::{Array2, Array3};
use styleinject_core::codec::{ImageAsset, ImageRole};
use styleinject_core::denoiser::{BackendConfig, CountingBackend, DenoiserBackend, InjectionDirective, ToyUNet, ToyUNetConfig};
use styleinject_core::injection::{FeatureBank, InjectionConfig};
use styleinject_core::latent::LatentTrajectory;
use styleinject_core::pipeline::{Engine, EngineConfig, TransferJob};
const FROZEN_SUM: f64 = -15.979886;
const FROZEN_ABS: f64 = 453.100476;
const FROZEN_PROBES: [f32; 3] = [-0.908_030_9, -0.965_350_5, -1.238_216_9];

fn toy() -> ToyUNetConfig {
    ToyUNetConfig { channels: 8, attn_dim: 4, time_dim: 8, patch: 1, ..Default::default() }
}

fn engine() -> (Engine, Arc<CountingBackend<ToyUNet>>) {
    let backend = Arc::new(CountingBackend::new(ToyUNet::new(toy()).unwrap()));
    let cfg = EngineConfig { backend: BackendConfig::Toy(toy()), ..Default::default() };
    (Engine::with_backend(cfg, backend.clone()).unwrap(), backend)
}

fn image(k: usize, role: ImageRole) -> ImageAsset {
    ImageAsset::new(Array3::from_shape_fn((3, 8, 8), |(c, y, x)| ((c + y * k + x * 2) % 7) as f32 / 6.0), role).unwrap()
}

fn job(steps: usize) -> TransferJob {
    let cfg = InjectionConfig { sample_steps: steps, ..Default::default() };
    TransferJob::new(image(1, ImageRole::Content), image(3, ImageRole::Style), cfg)
}

#[test]
fn sweep_inverts_content_once_and_matches_single_runs() {
    let (engine, counter) = engine();
    let alphas = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    counter.reset();
    let sweep = engine.sweep_alpha(&job(10), &alphas).unwrap();
    assert_eq!(sweep.content_inversions, 1);
    assert_eq!(sweep.results.len(), 6);
    // style chain grows as α does but never recomputes earlier steps
    assert_eq!(sweep.inversion_evaluations, 10 + 10);
    for (a, r) in alphas.iter().zip(&sweep.results) {
        let mut j = job(10);
        j.config.alpha = *a;
        let single = engine.run_style_transfer(&j).unwrap();
        assert_eq!(single.output.pixels(), r.output.pixels(), "alpha {a}");
    }
}

#[test]
fn banks_and_latents_round_trip_through_disk() {
    let (engine, _) = engine();
    let mut j = job(6);
    j.config.alpha = 0.5;
    j.keep_banks = true;
    j.keep_latents = true;
    let r = engine.run_style_transfer(&j).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let content = r.content_bank.unwrap();
    content.save(&dir.path().join("content")).unwrap();
    assert_eq!(FeatureBank::load(&dir.path().join("content")).unwrap(), content);
    let style = r.style_bank.unwrap();
    assert_eq!(style.steps().iter().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
    style.save(&dir.path().join("style")).unwrap();
    assert_eq!(FeatureBank::load(&dir.path().join("style")).unwrap(), style);

    let s = engine.schedule_for(6).unwrap();
    let latents = r.latents.unwrap();
    assert_eq!(latents.len(), 6);
    latents.save(&dir.path().join("latents"), &s).unwrap();
    let back = LatentTrajectory::load(&dir.path().join("latents"), &s).unwrap();
    assert_eq!(back.steps().collect::<Vec<_>>(), latents.steps().collect::<Vec<_>>());
    assert_eq!(back.get(0).unwrap().data(), latents.get(0).unwrap().data());
    // a different schedule must not silently accept the dump
    assert!(LatentTrajectory::load(&dir.path().join("latents"), &engine.schedule_for(5).unwrap()).is_err());
}

#[test]
fn trace_json_is_self_describing() {
    let (engine, _) = engine();
    let r = engine.run_style_transfer(&job(4)).unwrap();
    let v = r.trace_json();
    assert_eq!(v["steps"].as_array().unwrap().len(), 4);
    assert_eq!(v["steps"][0]["mode"], "content");
    assert_eq!(v["steps"][3]["mode"], "content");
    assert_eq!(v["target_conditioning"], "content_and_style");
}

/// Pins the toy weights and forward pass; tolerances absorb SIMD-dependent rounding.
#[test]
fn toy_weights_and_output_are_frozen() {
    let net = ToyUNet::new(ToyUNetConfig::default()).unwrap();
    let z = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 13) as f32 / 6.5 - 1.0);
    let cond = Array2::from_shape_fn((12, 32), |(i, j)| ((i * 5 + j) % 9) as f32 / 9.0 - 0.5);
    let out = net.predict_noise(&z, 500, &cond, &InjectionDirective::none(), false).unwrap();
    let sum: f64 = out.eps.iter().map(|v| f64::from(*v)).sum();
    let abs: f64 = out.eps.iter().map(|v| f64::from(v.abs())).sum();
    let probes = [out.eps[[0, 0, 0]], out.eps[[1, 7, 9]], out.eps[[2, 15, 15]]];
    let frozen = (FROZEN_SUM, FROZEN_ABS, FROZEN_PROBES);
    assert!((sum - frozen.0).abs() <= 1e-3 * frozen.1, "sum {sum}");
    assert!((abs - frozen.1).abs() <= 1e-4 * frozen.1, "abs {abs}");
    for (p, f) in probes.iter().zip(frozen.2) {
        assert!((p - f).abs() <= 1e-4, "{p} vs {f}");
    }
}

#[test]
fn edit_with_content_prompt_is_plain_transfer() {
    let (engine, _) = engine();
    let mut j = job(6);
    j.content_prompt = "a cat".into();
    let plain = engine.run_style_transfer(&j).unwrap();
    j.edit_prompt = Some("a cat".into());
    let same = engine.run_edit(&j).unwrap();
    assert_eq!(plain.output.pixels(), same.output.pixels());
    j.edit_prompt = Some("dog".into());
    let dog = engine.run_edit(&j).unwrap();
    j.edit_prompt = Some("a red bicycle".into());
    let bike = engine.run_edit(&j).unwrap();
    assert_ne!(dog.output.pixels(), bike.output.pixels());
    assert_ne!(dog.output.pixels(), plain.output.pixels());
    // spatial injections are unchanged by the edit
    assert_eq!(
        dog.trace.iter().map(|s| (s.mode, s.attention_layers.clone())).collect::<Vec<_>>(),
        plain.trace.iter().map(|s| (s.mode, s.attention_layers.clone())).collect::<Vec<_>>()
    );
}

#[test]
fn translation_is_an_alias_of_transfer() {
    let (engine, _) = engine();
    for (k, alpha) in [(3, 0.2), (5, 0.5), (6, 1.0)] {
        let reference = image(k, ImageRole::Style);
        let cfg = InjectionConfig { sample_steps: 5, alpha, ..Default::default() };
        let mut j = TransferJob::new(image(1, ImageRole::Content), reference.clone(), cfg.clone());
        j.seed = k as u64;
        let a = engine.run_style_transfer(&j).unwrap();
        let b = engine.run_translation(&image(1, ImageRole::Content), &reference, &cfg, k as u64).unwrap();
        assert_eq!(a.output.pixels(), b.output.pixels(), "alpha {alpha}");
    }
}

#[test]
fn departure_from_alpha_zero_grows_across_extremes() {
    let (engine, _) = engine();
    let sweep = engine.sweep_alpha(&job(10), &[0.0, 0.5, 1.0]).unwrap();
    let base = &sweep.results[0].output;
    let d: Vec<f64> = sweep.results.iter().map(|r| styleinject_core::metrics::pixel_mse(&r.output, base).unwrap()).collect();
    assert_eq!(d[0], 0.0);
    assert!(d[1] <= d[2], "{d:?}");
}
