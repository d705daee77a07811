//! Image ↔ latent mapping. The toy codec applies a fixed orthogonal linear map
//! to every `f × f` RGB patch, so decoding inverts encoding exactly.
//!
//! Pixels live in `[0, 1]`; they are rescaled to `[-1, 1]` before the patch map.

use std::io::Cursor;
use std::path::Path;

use image::{imageops::FilterType, ImageFormat, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{Branch, Latent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Content,
    Style,
    Output,
}

/// RGB image, `(3, height, width)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageAsset {
    pixels: Array3<f32>,
    role: ImageRole,
}

impl ImageAsset {
    /// Values are clamped into `[0, 1]`; non-finite values are rejected.
    pub fn new(mut pixels: Array3<f32>, role: ImageRole) -> Result<Self> {
        if pixels.dim().0 != 3 {
            return Err(Error::Shape(format!("image needs 3 channels, got {}", pixels.dim().0)));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("image holds non-finite pixels".into()));
        }
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(Self { pixels, role })
    }

    pub fn solid(h: usize, w: usize, rgb: [f32; 3], role: ImageRole) -> Result<Self> {
        Self::new(Array3::from_shape_fn((3, h, w), |(c, _, _)| rgb[c]), role)
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn role(&self) -> ImageRole {
        self.role
    }

    pub fn with_role(mut self, role: ImageRole) -> Self {
        self.role = role;
        self
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (_, h, w) = self.pixels.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.pixels[[c, y as usize, x as usize]] * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &RgbImage, role: ImageRole) -> Result<Self> {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Self::new(pixels, role)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_image_bytes(bytes: &[u8], role: ImageRole) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Self::from_rgb8(&img, role)
    }

    pub fn load_png(path: &Path, role: ImageRole) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_image_bytes(&bytes, role)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Resamples to `(h, w)` through 8-bit RGB.
    pub fn resized(&self, h: usize, w: usize) -> Result<Self> {
        if (h, w) == (self.height(), self.width()) {
            return Ok(self.clone());
        }
        let out = image::imageops::resize(&self.to_rgb8(), w as u32, h as u32, FilterType::Triangle);
        Self::from_rgb8(&out, self.role)
    }
}

/// Shapes a flat channel-major `[3 * h * w]` buffer into image pixels.
pub fn pixels_from_vec(h: usize, w: usize, values: Vec<f32>) -> Result<Array3<f32>> {
    let n = values.len();
    Array3::from_shape_vec((3, h, w), values)
        .map_err(|_| Error::Shape(format!("{n} values cannot form a 3x{h}x{w} image")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    /// Pixel-unshuffle only; with `factor = 1` the latent is the rescaled image.
    #[default]
    Identity,
    /// Seeded random orthogonal map per patch.
    Orthogonal,
    /// A pretrained VAE served elsewhere; unavailable in this build.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub factor: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { kind: CodecKind::Identity, factor: 1 }
    }
}

impl CodecConfig {
    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    pub fn build(&self, seed: u64) -> Result<LatentCodec> {
        LatentCodec::new(self.kind, self.factor, seed)
    }
}

#[derive(Debug, Clone)]
pub struct LatentCodec {
    factor: usize,
    /// Row-orthogonal `(latent_channels, 3 f²)` patch map.
    map: Array2<f32>,
}

impl LatentCodec {
    pub fn new(kind: CodecKind, factor: usize, seed: u64) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("codec factor must be positive".into()));
        }
        let n = 3 * factor * factor;
        let map = match kind {
            CodecKind::Identity => Array2::eye(n),
            CodecKind::Orthogonal => random_orthogonal(n, seed),
            CodecKind::External => return Err(Error::Capability("external VAE codec".into())),
        };
        Ok(Self { factor, map })
    }

    pub fn identity() -> Self {
        Self::new(CodecKind::Identity, 1, 0).expect("identity codec")
    }

    pub fn downscale_factor(&self) -> usize {
        self.factor
    }

    pub fn latent_channels(&self) -> usize {
        self.map.nrows()
    }

    pub fn encode(&self, img: &ImageAsset, branch: Branch) -> Result<Latent> {
        let (_, h, w) = img.pixels.dim();
        let f = self.factor;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by codec factor {f}")));
        }
        let (gh, gw) = (h / f, w / f);
        // (3 f², positions) patch matrix
        let patches = Array2::from_shape_fn((3 * f * f, gh * gw), |(k, pos)| {
            let (c, rem) = (k / (f * f), k % (f * f));
            let (y, x) = ((pos / gw) * f + rem / f, (pos % gw) * f + rem % f);
            2.0 * img.pixels[[c, y, x]] - 1.0
        });
        let z = self.map.dot(&patches);
        let data = z.into_shape_with_order((self.latent_channels(), gh, gw)).map_err(|e| Error::Shape(e.to_string()))?;
        Latent::new(data, 0, branch)
    }

    pub fn decode(&self, z: &Latent) -> Result<ImageAsset> {
        let [c, gh, gw] = z.shape();
        if c != self.latent_channels() {
            return Err(Error::Shape(format!("latent has {c} channels, codec expects {}", self.latent_channels())));
        }
        let f = self.factor;
        let flat = z.data().to_shape((c, gh * gw)).map_err(|e| Error::Shape(e.to_string()))?;
        let patches = self.map.t().dot(&flat);
        let pixels = Array3::from_shape_fn((3, gh * f, gw * f), |(ch, y, x)| {
            let k = ch * f * f + (y % f) * f + x % f;
            let pos = (y / f) * gw + x / f;
            (patches[[k, pos]] + 1.0) * 0.5
        });
        ImageAsset::new(pixels, ImageRole::Output)
    }
}

/// Modified Gram-Schmidt on a seeded Gaussian matrix, in f64.
fn random_orthogonal(n: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0063_6f64_6563);
    let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let prev = rows[j].clone();
            rows[i].iter_mut().zip(&prev).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        rows[i].iter_mut().for_each(|a| *a /= norm);
    }
    Array2::from_shape_fn((n, n), |(i, j)| rows[i][j] as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> ImageAsset {
        ImageAsset::new(
            Array3::from_shape_fn((3, h, w), |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 17) as f32 / 16.0),
            ImageRole::Content,
        )
        .unwrap()
    }

    #[test]
    fn identity_codec_rescales_pixels() {
        let img = gradient(4, 6);
        let z = LatentCodec::identity().encode(&img, Branch::Content).unwrap();
        assert_eq!(z.shape(), [3, 4, 6]);
        for (zv, pv) in z.data().iter().zip(img.pixels()) {
            assert_eq!(*zv, 2.0 * pv - 1.0);
        }
    }

    #[test]
    fn factor_eight_shape() {
        let codec = LatentCodec::new(CodecKind::Orthogonal, 8, 3).unwrap();
        let z = codec.encode(&gradient(64, 64), Branch::Content).unwrap();
        assert_eq!(z.shape(), [192, 8, 8]);
    }

    #[test]
    fn round_trip_is_exact() {
        for (kind, f) in [(CodecKind::Identity, 1), (CodecKind::Identity, 2), (CodecKind::Orthogonal, 2), (CodecKind::Orthogonal, 4)] {
            let codec = LatentCodec::new(kind, f, 9).unwrap();
            let img = gradient(16, 8);
            let back = codec.decode(&codec.encode(&img, Branch::Style).unwrap()).unwrap();
            let err = (back.pixels() - img.pixels()).mapv(f32::abs).fold(0.0f32, |m, v| m.max(*v));
            assert!(err <= 1e-6, "{kind:?} f={f}: {err}");
        }
    }

    #[test]
    fn decode_clamps_out_of_range_latents() {
        let codec = LatentCodec::new(CodecKind::Orthogonal, 2, 1).unwrap();
        let z = Latent::new(Array3::from_shape_fn((12, 3, 3), |(c, y, x)| (c as f32 - 6.0) * (1.0 + y as f32 + x as f32)), 0, Branch::Target)
            .unwrap();
        let img = codec.decode(&z).unwrap();
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(img.pixels().iter().any(|v| *v == 0.0) && img.pixels().iter().any(|v| *v == 1.0));
    }

    #[test]
    fn errors() {
        let codec = LatentCodec::new(CodecKind::Identity, 4, 0).unwrap();
        assert!(matches!(codec.encode(&gradient(6, 8), Branch::Content), Err(Error::Shape(_))));
        let wrong = Latent::new(Array3::zeros((3, 2, 2)), 0, Branch::Target).unwrap();
        assert!(matches!(codec.decode(&wrong), Err(Error::Shape(_))));
        assert!(matches!(LatentCodec::new(CodecKind::External, 8, 0), Err(Error::Capability(_))));
    }

    #[test]
    fn png_round_trip_of_8bit_values() {
        let img = gradient(5, 7);
        let back = ImageAsset::from_image_bytes(&img.to_png_bytes().unwrap(), ImageRole::Content).unwrap();
        let err = (back.pixels() - img.pixels()).mapv(f32::abs).fold(0.0f32, |m, v| m.max(*v));
        assert!(err <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn orthogonal_map_is_orthogonal() {
        let m = random_orthogonal(12, 5);
        let eye = m.dot(&m.t());
        for ((i, j), v) in eye.indexed_iter() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-5);
        }
    }
}
