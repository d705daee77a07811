//! Text conditioning: prompt embeddings, text-aligned style-image embeddings
//! and their row-wise concatenation.
//!
//! The stub encoders are pure functions of `(seed, input)`. Pretrained
//! encoders are selected by name and are unavailable in this build, which
//! surfaces as [`Error::Capability`] rather than a silent fallback.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{ImageAsset, ImageRole};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "name")]
pub enum EncoderKind {
    #[default]
    Stub,
    External(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningConfig {
    /// Shared token width of both encoders.
    pub dim: usize,
    pub text_tokens: usize,
    pub style_tokens: usize,
    pub text_encoder: EncoderKind,
    pub style_encoder: EncoderKind,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            text_tokens: 8,
            style_tokens: 4,
            text_encoder: EncoderKind::Stub,
            style_encoder: EncoderKind::Stub,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    ClipTextStub,
    ClipTextReal,
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSource {
    BlipStub,
    BlipReal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Array2<f32>,
    pub source: TextSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding {
    pub tokens: Array2<f32>,
    pub source: StyleSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub v_c: TextEmbedding,
    pub v_s: StyleEmbedding,
    /// `concat(v_c, v_s)` along the token axis.
    pub v_st: Array2<f32>,
    pub null_embedding: TextEmbedding,
}

impl ConditioningBundle {
    pub fn new(v_c: TextEmbedding, v_s: StyleEmbedding, null_embedding: TextEmbedding) -> Result<Self> {
        if v_c.tokens.ncols() != v_s.tokens.ncols() || v_c.tokens.ncols() != null_embedding.tokens.ncols() {
            return Err(Error::Config(format!(
                "text width {} and style width {} differ",
                v_c.tokens.ncols(),
                v_s.tokens.ncols()
            )));
        }
        let v_st = concatenate(Axis(0), &[v_c.tokens.view(), v_s.tokens.view()]).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { v_c, v_s, v_st, null_embedding })
    }
}

/// Seeded encoder pair.
#[derive(Debug, Clone)]
pub struct Conditioner {
    cfg: ConditioningConfig,
    seed: u64,
    positions: Array2<f32>,
    style_proj: Array2<f32>,
    style_bias: Array1<f32>,
}

const STYLE_STATS: usize = 18;

impl Conditioner {
    pub fn new(cfg: ConditioningConfig, seed: u64) -> Result<Self> {
        if cfg.dim == 0 || cfg.text_tokens < 2 || cfg.style_tokens == 0 {
            return Err(Error::Config("conditioning needs dim > 0, text_tokens >= 2, style_tokens > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874);
        let mut normal = |r: usize, c: usize, scale: f32| {
            Array2::from_shape_fn((r, c), |_| {
                let v: f32 = StandardNormal.sample(&mut rng);
                v * scale
            })
        };
        let positions = normal(cfg.text_tokens, cfg.dim, 0.1);
        let style_proj = normal(STYLE_STATS, cfg.style_tokens * cfg.dim, 1.0 / (STYLE_STATS as f32).sqrt());
        let style_bias = normal(1, cfg.style_tokens * cfg.dim, 0.5).row(0).to_owned();
        Ok(Self { cfg, seed, positions, style_proj, style_bias })
    }

    pub fn config(&self) -> &ConditioningConfig {
        &self.cfg
    }

    /// `ψ(prompt)`: BOS, one row per word (truncated), then padding rows.
    /// The empty prompt yields the null embedding.
    pub fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        if let EncoderKind::External(name) = &self.cfg.text_encoder {
            return Err(Error::Capability(format!("text encoder '{name}'")));
        }
        let words: Vec<String> = prompt.split_whitespace().map(str::to_lowercase).collect();
        let n = self.cfg.text_tokens;
        let mut tokens = Array2::<f32>::zeros((n, self.cfg.dim));
        let body = words.iter().take(n - 2).map(String::as_str);
        let seq = std::iter::once("<bos>").chain(body).chain(std::iter::repeat("<pad>"));
        for (i, tok) in seq.take(n).enumerate() {
            let row = self.token_vector(tok) + self.positions.row(i);
            tokens.row_mut(i).assign(&row);
        }
        let source = if words.is_empty() { TextSource::Null } else { TextSource::ClipTextStub };
        Ok(TextEmbedding { tokens, source })
    }

    pub fn null_embedding(&self) -> Result<TextEmbedding> {
        self.encode_text("")
    }

    fn token_vector(&self, token: &str) -> Array1<f32> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        Array1::from_shape_fn(self.cfg.dim, |_| StandardNormal.sample(&mut rng))
    }

    /// `F(image, text)`: pooled colour statistics projected into
    /// `style_tokens` rows of conditioning width, offset by the mean text token.
    pub fn encode_style_image(&self, img: &ImageAsset, text: &str) -> Result<StyleEmbedding> {
        if let EncoderKind::External(name) = &self.cfg.style_encoder {
            return Err(Error::Capability(format!("style encoder '{name}'")));
        }
        if img.role() != ImageRole::Style {
            return Err(Error::Config(format!("style encoder received a {:?} image", img.role())));
        }
        let stats = Array1::from(pooled_stats(img));
        let flat = stats.dot(&self.style_proj) + &self.style_bias;
        let mut tokens = flat
            .into_shape_with_order((self.cfg.style_tokens, self.cfg.dim))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let text_mean = self.encode_text(text)?.tokens.mean_axis(Axis(0)).expect("non-empty");
        tokens += &text_mean;
        Ok(StyleEmbedding { tokens, source: StyleSource::BlipStub })
    }

    /// Builds `v_st = concat(v_c, v_s)`; a present edit prompt replaces the
    /// content prompt.
    pub fn build_bundle(&self, content_prompt: &str, style: &ImageAsset, edit_prompt: Option<&str>) -> Result<ConditioningBundle> {
        let v_s = self.encode_style_image(style, "")?;
        self.build_bundle_with_style(content_prompt, v_s, edit_prompt)
    }

    /// As [`Self::build_bundle`] with a precomputed style embedding.
    pub fn build_bundle_with_style(
        &self,
        content_prompt: &str,
        v_s: StyleEmbedding,
        edit_prompt: Option<&str>,
    ) -> Result<ConditioningBundle> {
        let v_c = self.encode_text(edit_prompt.unwrap_or(content_prompt))?;
        ConditioningBundle::new(v_c, v_s, self.null_embedding()?)
    }
}

/// Per-channel mean and standard deviation plus per-quadrant channel means,
/// centred around mid-grey.
fn pooled_stats(img: &ImageAsset) -> Vec<f32> {
    let px = img.pixels();
    let (_, h, w) = px.dim();
    let mut out = Vec::with_capacity(STYLE_STATS);
    for c in 0..3 {
        let ch = px.index_axis(Axis(0), c);
        let mean = ch.mean().unwrap_or(0.0);
        let var = ch.fold(0.0, |a, v| a + (v - mean) * (v - mean)) / ch.len() as f32;
        out.push(2.0 * mean - 1.0);
        out.push(2.0 * var.sqrt());
    }
    let (hh, hw) = (h.div_ceil(2), w.div_ceil(2));
    for (y0, y1) in [(0, hh), (h - hh, h)] {
        for (x0, x1) in [(0, hw), (w - hw, w)] {
            for c in 0..3 {
                let m = px.slice(s![c, y0..y1, x0..x1]).mean().unwrap_or(0.0);
                out.push(2.0 * m - 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::hash_f32;

    fn cond() -> Conditioner {
        Conditioner::new(ConditioningConfig::default(), 0).unwrap()
    }

    fn style(rgb: [f32; 3]) -> ImageAsset {
        ImageAsset::solid(8, 8, rgb, ImageRole::Style).unwrap()
    }

    #[test]
    fn text_determinism_and_distinctness() {
        let c = cond();
        let a = c.encode_text("").unwrap();
        assert_eq!(a, c.encode_text("").unwrap());
        assert_eq!(a.source, TextSource::Null);
        assert_ne!(c.encode_text("dog").unwrap().tokens, c.encode_text("cat").unwrap().tokens);
        assert_eq!(c.encode_text("Dog").unwrap(), c.encode_text(" dog ").unwrap());
    }

    #[test]
    fn text_shape_follows_config() {
        let cfg = ConditioningConfig { dim: 5, text_tokens: 3, ..Default::default() };
        let e = Conditioner::new(cfg, 1).unwrap().encode_text("a").unwrap();
        assert_eq!(e.tokens.dim(), (3, 5));
        assert_eq!(e.source, TextSource::ClipTextStub);
    }

    #[test]
    fn style_embedding_behaviour() {
        let c = cond();
        let red = c.encode_style_image(&style([1.0, 0.0, 0.0]), "").unwrap();
        assert_eq!(red, c.encode_style_image(&style([1.0, 0.0, 0.0]), "").unwrap());
        let blue = c.encode_style_image(&style([0.0, 0.0, 1.0]), "").unwrap();
        assert_ne!(red.tokens, blue.tokens);
        assert_eq!(red.tokens.dim(), (4, 32));
        let content = ImageAsset::solid(8, 8, [0.5; 3], ImageRole::Content).unwrap();
        assert!(c.encode_style_image(&content, "").is_err());
    }

    #[test]
    fn pooled_stats_of_constant_image() {
        let s = pooled_stats(&style([1.0, 0.5, 0.0]));
        assert_eq!(&s[..6], &[1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
        assert_eq!(&s[6..9], &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn bundle_concatenates_blocks_exactly() {
        let c = cond();
        let b = c.build_bundle("", &style([0.2, 0.4, 0.6]), None).unwrap();
        assert_eq!(b.v_c, c.encode_text("").unwrap());
        let n = b.v_c.tokens.nrows();
        assert_eq!(b.v_st.nrows(), n + b.v_s.tokens.nrows());
        assert_eq!(b.v_st.slice(s![..n, ..]), b.v_c.tokens);
        assert_eq!(b.v_st.slice(s![n.., ..]), b.v_s.tokens);
    }

    #[test]
    fn edit_prompt_replaces_content_embedding() {
        let c = cond();
        let img = style([0.9, 0.1, 0.3]);
        let plain = c.build_bundle("", &img, None).unwrap();
        let edit = c.build_bundle("", &img, Some("dog")).unwrap();
        assert_eq!(edit.v_c, c.encode_text("dog").unwrap());
        assert_eq!(edit.v_s, plain.v_s);
    }

    #[test]
    fn external_encoders_fail_explicitly() {
        let cfg = ConditioningConfig { style_encoder: EncoderKind::External("blip2".into()), ..Default::default() };
        let c = Conditioner::new(cfg, 0).unwrap();
        assert!(matches!(c.encode_style_image(&style([0.0; 3]), ""), Err(Error::Capability(_))));
        let cfg = ConditioningConfig { text_encoder: EncoderKind::External("clip".into()), ..Default::default() };
        assert!(matches!(Conditioner::new(cfg, 0).unwrap().encode_text("x"), Err(Error::Capability(_))));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let c = cond();
        let v_c = c.encode_text("").unwrap();
        let v_s = StyleEmbedding { tokens: Array2::zeros((2, 7)), source: StyleSource::BlipStub };
        assert!(matches!(ConditioningBundle::new(v_c.clone(), v_s, v_c), Err(Error::Config(_))));
    }

    #[test]
    fn stub_golden_hashes() {
        let c = cond();
        let text = hash_f32(c.encode_text("a photo of a cat").unwrap().tokens.iter());
        let sty = hash_f32(c.encode_style_image(&style([0.25, 0.5, 0.75]), "").unwrap().tokens.iter());
        assert_eq!(text, GOLDEN_TEXT, "text stub drifted");
        assert_eq!(sty, GOLDEN_STYLE, "style stub drifted");
    }

    const GOLDEN_TEXT: &str = "2bbb4d86580e71a9bc23ca6bd6de3c81e668336a775d73894bd6f71e8395b3b9";
    const GOLDEN_STYLE: &str = "ca669a6a773184e00dbd343db2fac5911763da20b78cc2f20a6702f52d84dfc3";
}
