//! Desk-scale evaluation: feature content loss, Gram style loss and pixel MSE
//! over a seeded random-convolution feature extractor.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::ImageAsset;
use crate::denoiser::toy::{avg_pool2, conv3x3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// 3x3 random convolutions with 2x average pooling between layers.
    ToyRandomConv,
    /// 1x1 random projections; features at every layer stay unit-stride, so
    /// Gram matrices are exactly invariant to pixel permutations.
    Pointwise,
    External(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub seed: u64,
    /// Output channels of each layer.
    pub widths: Vec<usize>,
    /// Layers (indices into `widths`) contributing to the losses.
    pub layers: Vec<usize>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { kind: ExtractorKind::ToyRandomConv, seed: 0, widths: vec![16, 32, 32], layers: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    cfg: ExtractorConfig,
    weights: Vec<Array2<f32>>,
}

impl FeatureExtractor {
    pub fn new(cfg: ExtractorConfig) -> Result<Self> {
        if let ExtractorKind::External(name) = &cfg.kind {
            return Err(Error::Capability(format!("external feature extractor `{name}`")));
        }
        if cfg.widths.is_empty() || cfg.widths.contains(&0) {
            return Err(Error::Config("extractor needs at least one non-empty layer".into()));
        }
        if cfg.layers.is_empty() || cfg.layers.iter().any(|&l| l >= cfg.widths.len()) {
            return Err(Error::Config(format!("loss layers {:?} out of range for {} layers", cfg.layers, cfg.widths.len())));
        }
        let taps = if cfg.kind == ExtractorKind::Pointwise { 1 } else { 9 };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut c_in = 3;
        let mut weights = Vec::with_capacity(cfg.widths.len());
        for &c_out in &cfg.widths {
            let rows = taps * c_in;
            let scale = (2.0 / rows as f32).sqrt();
            weights.push(Array2::from_shape_fn((rows, c_out), |_| {
                let v: f32 = StandardNormal.sample(&mut rng);
                v * scale
            }));
            c_in = c_out;
        }
        Ok(Self { cfg, weights })
    }

    pub fn toy(seed: u64) -> Self {
        Self::new(ExtractorConfig { seed, ..Default::default() }).expect("default extractor config is valid")
    }

    pub fn pointwise(seed: u64) -> Self {
        Self::new(ExtractorConfig { kind: ExtractorKind::Pointwise, seed, ..Default::default() })
            .expect("default extractor config is valid")
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    /// Features of every layer in `(positions, channels)` layout.
    pub fn features(&self, img: &ImageAsset) -> Vec<Array2<f32>> {
        let (h, w) = (img.height(), img.width());
        let px = img.pixels();
        let mut x = Array2::from_shape_fn((h * w, 3), |(r, c)| 2.0 * px[[c, r / w, r % w]] - 1.0);
        let mut hw = (h, w);
        let mut out = Vec::with_capacity(self.weights.len());
        for (i, wt) in self.weights.iter().enumerate() {
            let conv = self.cfg.kind == ExtractorKind::ToyRandomConv;
            if conv && i > 0 && hw.0 % 2 == 0 && hw.1 % 2 == 0 && hw.0 >= 4 && hw.1 >= 4 {
                x = avg_pool2(&x, hw);
                hw = (hw.0 / 2, hw.1 / 2);
            }
            x = if conv { conv3x3(&x, hw, wt) } else { x.dot(wt) };
            x.mapv_inplace(|v| v.max(0.0));
            out.push(x.clone());
        }
        out
    }

    fn selected<'a>(&self, feats: &'a [Array2<f32>]) -> impl Iterator<Item = &'a Array2<f32>> + 'a {
        let layers = self.cfg.layers.clone();
        layers.into_iter().map(move |l| &feats[l])
    }
}

/// Channel Gram matrix normalised by the number of positions, in f64.
pub fn gram(f: &Array2<f32>) -> Array2<f64> {
    let f = f.mapv(f64::from);
    let n = f.nrows().max(1) as f64;
    f.t().dot(&f) / n
}

fn same_dims(a: &ImageAsset, b: &ImageAsset) -> Result<()> {
    if a.pixels().dim() != b.pixels().dim() {
        return Err(Error::Shape(format!("images differ in size: {:?} vs {:?}", a.pixels().dim(), b.pixels().dim())));
    }
    Ok(())
}

fn mean_sq_f32(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>() / n
}

/// Mean squared feature distance averaged over the configured layers.
pub fn content_loss(gen: &ImageAsset, content: &ImageAsset, fx: &FeatureExtractor) -> Result<f64> {
    same_dims(gen, content)?;
    let (fa, fb) = (fx.features(gen), fx.features(content));
    let terms: Vec<f64> = fx.selected(&fa).zip(fx.selected(&fb)).map(|(a, b)| mean_sq_f32(a, b)).collect();
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Mean squared Gram-matrix distance averaged over the configured layers.
pub fn style_loss(gen: &ImageAsset, style: &ImageAsset, fx: &FeatureExtractor) -> Result<f64> {
    same_dims(gen, style)?;
    let (fa, fb) = (fx.features(gen), fx.features(style));
    let terms: Vec<f64> = fx
        .selected(&fa)
        .zip(fx.selected(&fb))
        .map(|(a, b)| {
            let d = gram(a) - gram(b);
            d.mapv(|v| v * v).mean().unwrap_or(0.0)
        })
        .collect();
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

pub fn pixel_mse(a: &ImageAsset, b: &ImageAsset) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.pixels().len() as f64;
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>() / n)
}

/// Metrics that need pretrained networks; none ship with this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalMetric {
    Lpips,
    ClipScore,
}

impl ExternalMetric {
    pub fn evaluate(&self, _a: &ImageAsset, _b: &ImageAsset) -> Result<f64> {
        Err(Error::Capability(format!("{self:?} (requires pretrained weights)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub content_loss: f64,
    pub style_loss: f64,
    pub mse: f64,
    pub runtime_ms: f64,
}

/// Scores `output` against its content and style inputs.
pub fn evaluate_pair(
    name: &str,
    output: &ImageAsset,
    content: &ImageAsset,
    style: &ImageAsset,
    fx: &FeatureExtractor,
    runtime_ms: f64,
) -> Result<MetricsRow> {
    Ok(MetricsRow {
        name: name.to_string(),
        content_loss: content_loss(output, content, fx)?,
        style_loss: style_loss(output, style, fx)?,
        mse: pixel_mse(output, content)?,
        runtime_ms,
    })
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Row-permutes every pixel of an image; used to probe Gram invariance.
pub fn shuffle_pixels(img: &ImageAsset, seed: u64) -> ImageAsset {
    use rand::seq::SliceRandom;
    let (h, w) = (img.height(), img.width());
    let mut order: Vec<usize> = (0..h * w).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let px = img.pixels();
    let flat = px.to_shape((3, h * w)).expect("contiguous").to_owned();
    let shuffled = flat.select(Axis(1), &order).as_standard_layout().into_owned();
    let shuffled = shuffled.into_shape_with_order((3, h, w)).expect("same size");
    ImageAsset::new(shuffled, img.role()).expect("values already valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ImageRole;
    use ndarray::Array3;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageAsset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = Array3::from_shape_fn((3, h, w), |_| rand::Rng::random::<f32>(&mut rng));
        ImageAsset::new(px, ImageRole::Output).unwrap()
    }

    #[test]
    fn zero_on_identity() {
        let a = random_image(1, 16, 16);
        let fx = FeatureExtractor::toy(0);
        assert_eq!(content_loss(&a, &a, &fx).unwrap(), 0.0);
        assert_eq!(style_loss(&a, &a, &fx).unwrap(), 0.0);
        assert_eq!(pixel_mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn two_pixel_mse() {
        let mut pa = Array3::zeros((3, 1, 2));
        pa[[0, 0, 0]] = 1.0;
        let a = ImageAsset::new(pa, ImageRole::Output).unwrap();
        let mut pb = Array3::zeros((3, 1, 2));
        pb[[1, 0, 1]] = 0.5;
        let b = ImageAsset::new(pb, ImageRole::Output).unwrap();
        // (1 + 0.25) / 6
        assert!((pixel_mse(&a, &b).unwrap() - 1.25 / 6.0).abs() < 1e-12);
        assert_eq!(pixel_mse(&a, &b).unwrap(), pixel_mse(&b, &a).unwrap());
    }

    #[test]
    fn gram_is_permutation_invariant_on_pointwise_features() {
        let a = random_image(2, 16, 16);
        let b = shuffle_pixels(&a, 9);
        assert!(pixel_mse(&a, &b).unwrap() > 1e-3);
        let fx = FeatureExtractor::pointwise(3);
        assert!(style_loss(&a, &b, &fx).unwrap() <= 1e-6);
    }

    #[test]
    fn gram_matches_brute_force() {
        let a = random_image(4, 8, 8);
        let fx = FeatureExtractor::toy(1);
        let f = &fx.features(&a)[1];
        let g = gram(f);
        let (n, c) = f.dim();
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0f64;
                for p in 0..n {
                    acc += f[[p, i]] as f64 * f[[p, j]] as f64;
                }
                assert!((g[[i, j]] - acc / n as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn content_loss_grows_with_noise() {
        let base = ImageAsset::solid(16, 16, [0.5, 0.4, 0.6], ImageRole::Content).unwrap();
        let noise = random_image(5, 16, 16);
        let fx = FeatureExtractor::toy(0);
        let mut prev = 0.0;
        for eps in [0.02f32, 0.05, 0.1, 0.2, 0.3] {
            let px = base.pixels() + &(noise.pixels().mapv(|v| v - 0.5) * eps);
            let noisy = ImageAsset::new(px, ImageRole::Output).unwrap();
            let l = content_loss(&noisy, &base, &fx).unwrap();
            assert!(l > prev, "eps {eps}: {l} <= {prev}");
            prev = l;
        }
        let unrelated = random_image(6, 16, 16);
        assert!(content_loss(&unrelated, &base, &fx).unwrap() > prev);
    }

    #[test]
    fn errors() {
        let fx = FeatureExtractor::toy(0);
        let a = random_image(1, 8, 8);
        let b = random_image(1, 8, 16);
        assert!(matches!(content_loss(&a, &b, &fx), Err(Error::Shape(_))));
        assert!(matches!(style_loss(&a, &b, &fx), Err(Error::Shape(_))));
        assert!(matches!(ExternalMetric::Lpips.evaluate(&a, &a), Err(Error::Capability(_))));
        let cfg = ExtractorConfig { layers: vec![5], ..Default::default() };
        assert!(FeatureExtractor::new(cfg).is_err());
        let cfg = ExtractorConfig { kind: ExtractorKind::External("vgg".into()), ..Default::default() };
        assert!(matches!(FeatureExtractor::new(cfg), Err(Error::Capability(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![MetricsRow { name: "a".into(), content_loss: 0.5, style_loss: 0.25, mse: 0.1, runtime_ms: 12.0 }];
        let p = dir.path().join("m.csv");
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv(&p).unwrap(), rows);
    }
}
