//! Seeded, untrained U-Net used to exercise the injection algebra.
//!
//! Features travel in `(positions, channels)` layout, row index `y * w + x`.
//! Layout: a patchify stem, two encoder blocks at each of three resolutions,
//! a bottleneck, then twelve decoder blocks (three per resolution over four
//! resolutions), and a linear head back to latent patches.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::attention::{self_attention, AttentionWeights};
use super::{DenoiserBackend, InjectionDirective, LayerDescriptor, LayerInternals, LayerOverride, NoisePrediction, Side};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;
use crate::tensor_io::TensorStore;

const ENCODER_BLOCKS_PER_LEVEL: usize = 2;
const ENCODER_LEVELS: usize = 3;
const DECODER_BLOCKS_PER_LEVEL: usize = 3;
const LEVELS: usize = 4;
/// Decoder blocks below this number carry no self-attention.
const FIRST_ATTN_DECODER: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyUNetConfig {
    pub seed: u64,
    pub latent_channels: usize,
    pub cond_dim: usize,
    pub channels: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    /// Patchify factor of the stem; the latent must be divisible by `8 * patch`.
    pub patch: usize,
    pub residual_gain: f32,
    pub attn_gain: f32,
    pub cross_gain: f32,
    pub out_gain: f32,
    /// Adds the unit-Gaussian denoiser `sqrt(1 - alpha_bar) * z` to the
    /// network output, so the untrained model yields smooth DDIM trajectories.
    pub prior: Option<ScheduleConfig>,
}

impl Default for ToyUNetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_channels: 3,
            cond_dim: 32,
            channels: 32,
            attn_dim: 16,
            time_dim: 32,
            patch: 2,
            residual_gain: 0.5,
            attn_gain: 0.5,
            cross_gain: 0.1,
            out_gain: 0.5,
            prior: Some(ScheduleConfig::default()),
        }
    }
}

#[derive(Debug, Clone)]
struct CrossWeights {
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
}

#[derive(Debug, Clone)]
struct Block {
    desc: LayerDescriptor,
    skip: Option<Array2<f32>>,
    conv1: Array2<f32>,
    conv1_b: Array2<f32>,
    temb: Array2<f32>,
    conv2: Array2<f32>,
    conv2_b: Array2<f32>,
    attn: Option<AttentionWeights>,
    cross: CrossWeights,
}

#[derive(Debug, Clone)]
pub struct ToyUNet {
    cfg: ToyUNetConfig,
    stem: Array2<f32>,
    time1: Array2<f32>,
    time2: Array2<f32>,
    encoder: Vec<Block>,
    mid: Block,
    decoder: Vec<Block>,
    head: Array2<f32>,
    prior_scale: Option<Vec<f32>>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn matrix(&mut self, rows: usize, cols: usize, gain: f32) -> Array2<f32> {
        let std = gain / (rows as f32).sqrt();
        Array2::from_shape_fn((rows, cols), |_| {
            let v: f32 = StandardNormal.sample(&mut self.rng);
            v * std
        })
    }
}

impl ToyUNet {
    pub fn new(cfg: ToyUNetConfig) -> Result<Self> {
        if cfg.latent_channels == 0 || cfg.channels == 0 || cfg.attn_dim == 0 || cfg.cond_dim == 0 || cfg.patch == 0 {
            return Err(Error::Config("toy U-Net dimensions must be positive".into()));
        }
        if cfg.time_dim < 2 || !cfg.time_dim.is_multiple_of(2) {
            return Err(Error::Config("toy U-Net time_dim must be even and >= 2".into()));
        }
        let prior_scale = match &cfg.prior {
            Some(p) => Some(p.build()?.alphas_cumprod().iter().map(|a| (1.0 - a).sqrt() as f32).collect()),
            None => None,
        };
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
        let c = cfg.channels;
        let patch_dim = cfg.latent_channels * cfg.patch * cfg.patch;

        let stem = init.matrix(patch_dim, c, 1.0);
        let time1 = init.matrix(cfg.time_dim, cfg.time_dim, 1.0);
        let time2 = init.matrix(cfg.time_dim, cfg.time_dim, 1.0);

        let mut index = 0;
        let mut encoder = Vec::new();
        for level in 0..ENCODER_LEVELS {
            for _ in 0..ENCODER_BLOCKS_PER_LEVEL {
                let desc = LayerDescriptor {
                    index,
                    side: Side::Encoder,
                    number: encoder.len(),
                    stride: cfg.patch << level,
                    channels: c,
                    has_self_attn: true,
                    has_residual: true,
                };
                encoder.push(Self::block(&mut init, &cfg, desc, c));
                index += 1;
            }
        }
        let mid_desc = LayerDescriptor {
            index: usize::MAX,
            side: Side::Encoder,
            number: usize::MAX,
            stride: cfg.patch << (LEVELS - 1),
            channels: c,
            has_self_attn: false,
            has_residual: true,
        };
        let mid = Self::block(&mut init, &cfg, mid_desc, c);

        let mut decoder = Vec::new();
        for level in (0..LEVELS).rev() {
            for _ in 0..DECODER_BLOCKS_PER_LEVEL {
                let number = decoder.len();
                let desc = LayerDescriptor {
                    index,
                    side: Side::Decoder,
                    number,
                    stride: cfg.patch << level,
                    channels: c,
                    has_self_attn: number >= FIRST_ATTN_DECODER,
                    has_residual: true,
                };
                decoder.push(Self::block(&mut init, &cfg, desc, 2 * c));
                index += 1;
            }
        }
        let head = init.matrix(c, patch_dim, cfg.out_gain);

        Ok(Self { cfg, stem, time1, time2, encoder, mid, decoder, head, prior_scale })
    }

    fn block(init: &mut Init, cfg: &ToyUNetConfig, desc: LayerDescriptor, c_in: usize) -> Block {
        let c = cfg.channels;
        let d = cfg.attn_dim;
        let skip = (c_in != c).then(|| init.matrix(c_in, c, 1.0));
        let conv1 = init.matrix(9 * c_in, c, 1.0);
        let conv1_b = Array2::zeros((1, c));
        let temb = init.matrix(cfg.time_dim, c, 1.0);
        let conv2 = init.matrix(9 * c, c, cfg.residual_gain);
        let conv2_b = Array2::zeros((1, c));
        let attn = desc.has_self_attn.then(|| AttentionWeights {
            wq: init.matrix(c, d, 1.0),
            wk: init.matrix(c, d, 1.0),
            wv: init.matrix(c, d, 1.0),
            wo: init.matrix(d, c, cfg.attn_gain),
        });
        let cross = CrossWeights {
            wq: init.matrix(c, d, 1.0),
            wk: init.matrix(cfg.cond_dim, d, 1.0),
            wv: init.matrix(cfg.cond_dim, d, 1.0),
            wo: init.matrix(d, c, cfg.cross_gain),
        };
        Block { desc, skip, conv1, conv1_b, temb, conv2, conv2_b, attn, cross }
    }

    pub fn config(&self) -> &ToyUNetConfig {
        &self.cfg
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array2<f32>)> {
        let mut out: Vec<(String, &mut Array2<f32>)> = vec![
            ("stem".into(), &mut self.stem),
            ("time1".into(), &mut self.time1),
            ("time2".into(), &mut self.time2),
            ("head".into(), &mut self.head),
        ];
        let blocks = self
            .encoder
            .iter_mut()
            .enumerate()
            .map(|(i, b)| (format!("enc{i}"), b))
            .chain(std::iter::once(("mid".to_string(), &mut self.mid)))
            .chain(self.decoder.iter_mut().enumerate().map(|(i, b)| (format!("dec{i}"), b)));
        for (name, b) in blocks {
            if let Some(skip) = b.skip.as_mut() {
                out.push((format!("{name}.skip"), skip));
            }
            out.push((format!("{name}.conv1"), &mut b.conv1));
            out.push((format!("{name}.conv1_b"), &mut b.conv1_b));
            out.push((format!("{name}.temb"), &mut b.temb));
            out.push((format!("{name}.conv2"), &mut b.conv2));
            out.push((format!("{name}.conv2_b"), &mut b.conv2_b));
            if let Some(a) = b.attn.as_mut() {
                out.push((format!("{name}.attn.wq"), &mut a.wq));
                out.push((format!("{name}.attn.wk"), &mut a.wk));
                out.push((format!("{name}.attn.wv"), &mut a.wv));
                out.push((format!("{name}.attn.wo"), &mut a.wo));
            }
            out.push((format!("{name}.cross.wq"), &mut b.cross.wq));
            out.push((format!("{name}.cross.wk"), &mut b.cross.wk));
            out.push((format!("{name}.cross.wv"), &mut b.cross.wv));
            out.push((format!("{name}.cross.wo"), &mut b.cross.wo));
        }
        out
    }

    /// Writes the weights as a raw-tensor dump with the config in the manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut me = self.clone();
        let mut store = TensorStore::new();
        for (name, t) in me.params_mut() {
            store.insert(name, t.clone().into_dyn());
        }
        store.save(dir, "toy_unet", serde_json::to_value(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (mut store, manifest) = TensorStore::load(dir)?;
        if manifest.kind != "toy_unet" {
            return Err(Error::Config(format!("expected a toy_unet dump, found {}", manifest.kind)));
        }
        let cfg: ToyUNetConfig = serde_json::from_value(manifest.meta)?;
        let mut net = Self::new(cfg)?;
        for (name, slot) in net.params_mut() {
            let t = store.take(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape(format!("{name}: stored {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t.into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?;
        }
        Ok(net)
    }

    fn time_embedding(&self, timestep: usize) -> Array2<f32> {
        let half = self.cfg.time_dim / 2;
        let mut e = Array2::<f32>::zeros((1, self.cfg.time_dim));
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = timestep as f64 * freq;
            e[[0, i]] = arg.sin() as f32;
            e[[0, half + i]] = arg.cos() as f32;
        }
        let h = silu(e.dot(&self.time1));
        silu(h.dot(&self.time2))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &self,
        block: &Block,
        x: &Array2<f32>,
        hw: (usize, usize),
        temb: &Array2<f32>,
        cond: &Array2<f32>,
        ov: Option<&LayerOverride>,
        timestep: usize,
        capture: Option<&mut BTreeMap<usize, LayerInternals>>,
    ) -> Result<Array2<f32>> {
        let layer = block.desc.index;
        let inj_err = |msg: String| Error::Injection { layer, step: timestep, msg };

        let base = match &block.skip {
            Some(w) => x.dot(w),
            None => x.clone(),
        };
        let h = conv3x3(&layer_norm(x), hw, &block.conv1) + &block.conv1_b + &temb.dot(&block.temb);
        let residual = conv3x3(&silu(h), hw, &block.conv2) + &block.conv2_b;

        let phi = match ov.and_then(|o| o.residual.as_ref()) {
            Some(r) if !block.desc.has_residual => return Err(inj_err(format!("layer has no residual path (got {:?})", r.dim()))),
            Some(r) if r.dim() != residual.dim() => {
                return Err(inj_err(format!("residual override {:?} vs layer {:?}", r.dim(), residual.dim())))
            }
            Some(r) => &base + r,
            None => &base + &residual,
        };

        let attn_ov = ov.and_then(|o| o.attention.as_ref());
        let attn_in = layer_norm(&phi);
        let (after_attn, trace) = match &block.attn {
            Some(w) => {
                let tr = self_attention(attn_in.view(), w, attn_ov).map_err(|e| inj_err(e.to_string()))?;
                (&phi + &tr.out, Some(tr))
            }
            None if attn_ov.is_some() => return Err(inj_err("layer has no self-attention".into())),
            None => (phi.clone(), None),
        };

        let out = &after_attn + &cross_attention(&layer_norm(&after_attn), cond, &block.cross);

        if let Some(cap) = capture {
            cap.insert(
                layer,
                LayerInternals {
                    layer: block.desc.clone(),
                    residual,
                    attn_in,
                    attention: trace,
                    attn_out: out.clone(),
                },
            );
        }
        Ok(out)
    }
}

impl DenoiserBackend for ToyUNet {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    fn cond_dim(&self) -> usize {
        self.cfg.cond_dim
    }

    fn list_layers(&self) -> Vec<LayerDescriptor> {
        self.encoder.iter().chain(&self.decoder).map(|b| b.desc.clone()).collect()
    }

    fn predict_noise(
        &self,
        z: &Array3<f32>,
        timestep: usize,
        cond: &Array2<f32>,
        directives: &InjectionDirective,
        capture: bool,
    ) -> Result<NoisePrediction> {
        let (c, h, w) = z.dim();
        let unit = self.cfg.patch << (LEVELS - 1);
        if c != self.cfg.latent_channels {
            return Err(Error::Shape(format!("latent has {c} channels, model expects {}", self.cfg.latent_channels)));
        }
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::Shape(format!("latent {h}x{w} must be a positive multiple of {unit}")));
        }
        if cond.ncols() != self.cfg.cond_dim || cond.nrows() == 0 {
            return Err(Error::Shape(format!(
                "conditioning is {:?}, model expects (n, {})",
                cond.dim(),
                self.cfg.cond_dim
            )));
        }
        let n_layers = self.encoder.len() + self.decoder.len();
        if let Some(bad) = directives.layers.keys().find(|k| **k >= n_layers) {
            return Err(Error::Injection { layer: *bad, step: timestep, msg: "unknown layer".into() });
        }

        let prior = match &self.prior_scale {
            Some(p) => Some(*p.get(timestep).ok_or_else(|| {
                Error::Config(format!("timestep {timestep} beyond the {} training steps of the prior", p.len()))
            })?),
            None => None,
        };
        let mut captured = BTreeMap::new();
        let temb = self.time_embedding(timestep);
        let mut hw = (h / self.cfg.patch, w / self.cfg.patch);
        let mut x = patchify(z, self.cfg.patch).dot(&self.stem);

        let mut skips = Vec::with_capacity(LEVELS);
        let mut blocks = self.encoder.iter();
        for _ in 0..ENCODER_LEVELS {
            for block in blocks.by_ref().take(ENCODER_BLOCKS_PER_LEVEL) {
                let ov = directives.get(block.desc.index);
                x = self.run_block(block, &x, hw, &temb, cond, ov, timestep, capture.then_some(&mut captured))?;
            }
            skips.push(x.clone());
            x = avg_pool2(&x, hw);
            hw = (hw.0 / 2, hw.1 / 2);
        }
        skips.push(x.clone());
        x = self.run_block(&self.mid, &x, hw, &temb, cond, None, timestep, None)?;

        let mut blocks = self.decoder.iter();
        for level in (0..LEVELS).rev() {
            let skip = &skips[level];
            for block in blocks.by_ref().take(DECODER_BLOCKS_PER_LEVEL) {
                let input = concatenate(Axis(1), &[x.view(), skip.view()]).expect("matching rows");
                let ov = directives.get(block.desc.index);
                x = self.run_block(block, &input, hw, &temb, cond, ov, timestep, capture.then_some(&mut captured))?;
            }
            if level > 0 {
                x = upsample2(&x, hw);
                hw = (hw.0 * 2, hw.1 * 2);
            }
        }

        let out = layer_norm(&x).dot(&self.head);
        let mut eps = unpatchify(&out, (h, w), c, self.cfg.patch);
        if let Some(k) = prior {
            eps.scaled_add(k, z);
        }
        Ok(NoisePrediction { eps, internals: captured })
    }
}

fn silu(mut x: Array2<f32>) -> Array2<f32> {
    x.mapv_inplace(|v| v / (1.0 + (-v).exp()));
    x
}

/// Per-position normalisation over channels, without affine parameters.
fn layer_norm(x: &Array2<f32>) -> Array2<f32> {
    let mut out = x.clone();
    let n = x.ncols() as f32;
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Cross-attention of feature rows onto conditioning tokens (scaled output).
fn cross_attention(x: &Array2<f32>, cond: &Array2<f32>, w: &CrossWeights) -> Array2<f32> {
    let q = x.dot(&w.wq);
    let k = cond.dot(&w.wk);
    let v = cond.dot(&w.wv);
    let (_, mixed) = super::attention::attend(q.view(), k.view(), v.view()).expect("projection widths agree");
    mixed.dot(&w.wo)
}

/// Zero-padded 3x3 convolution as an im2col product; `weight` is `(9 * c_in, c_out)`.
pub(crate) fn conv3x3(x: &Array2<f32>, hw: (usize, usize), weight: &Array2<f32>) -> Array2<f32> {
    let (h, w) = hw;
    let c = x.ncols();
    let mut cols = Array2::<f32>::zeros((h * w, 9 * c));
    for y in 0..h {
        for xx in 0..w {
            let row = y * w + xx;
            for (k, (dy, dx)) in NEIGHBOURS.iter().enumerate() {
                let (sy, sx) = (y as isize + dy, xx as isize + dx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let src = sy as usize * w + sx as usize;
                cols.slice_mut(s![row, k * c..(k + 1) * c]).assign(&x.row(src));
            }
        }
    }
    cols.dot(weight)
}

const NEIGHBOURS: [(isize, isize); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

pub(crate) fn avg_pool2(x: &Array2<f32>, hw: (usize, usize)) -> Array2<f32> {
    let (h, w) = hw;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::<f32>::zeros((oh * ow, x.ncols()));
    for y in 0..oh {
        for xx in 0..ow {
            let mut acc: Array1<f32> = Array1::zeros(x.ncols());
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                acc += &x.row((2 * y + dy) * w + 2 * xx + dx);
            }
            out.row_mut(y * ow + xx).assign(&(acc * 0.25));
        }
    }
    out
}

fn upsample2(x: &Array2<f32>, hw: (usize, usize)) -> Array2<f32> {
    let (h, w) = hw;
    let ow = 2 * w;
    let mut out = Array2::<f32>::zeros((4 * h * w, x.ncols()));
    for y in 0..2 * h {
        for xx in 0..ow {
            out.row_mut(y * ow + xx).assign(&x.row((y / 2) * w + xx / 2));
        }
    }
    out
}

/// `(c, h, w)` → `(h/p * w/p, c * p * p)`.
fn patchify(z: &Array3<f32>, p: usize) -> Array2<f32> {
    let (c, h, w) = z.dim();
    let (gh, gw) = (h / p, w / p);
    Array2::from_shape_fn((gh * gw, c * p * p), |(row, col)| {
        let (gy, gx) = (row / gw, row % gw);
        let (ch, rem) = (col / (p * p), col % (p * p));
        z[[ch, gy * p + rem / p, gx * p + rem % p]]
    })
}

fn unpatchify(x: &Array2<f32>, hw: (usize, usize), c: usize, p: usize) -> Array3<f32> {
    let gw = hw.1 / p;
    Array3::from_shape_fn((c, hw.0, hw.1), |(ch, y, xx)| {
        let row = (y / p) * gw + xx / p;
        let col = ch * p * p + (y % p) * p + xx % p;
        x[[row, col]]
    })
}
