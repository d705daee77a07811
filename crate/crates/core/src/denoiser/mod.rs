//! Noise-prediction backends that expose per-layer internals and accept
//! feature-replacement directives.

mod attention;
pub(crate) mod toy;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{attend, self_attention, softmax_rows, AttentionKind, AttentionOverride, AttentionTrace, AttentionWeights};
pub use toy::{ToyUNet, ToyUNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Encoder,
    Decoder,
}

/// One block of the U-Net as seen by the injection machinery.
///
/// Decoder blocks are numbered 0..=11 from the lowest resolution upwards:
/// 0-2 residual only, 3-5, 6-8 and 9-11 with self-attention at successively
/// doubling resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    /// Global id, unique across both sides; keys directives and internals.
    pub index: usize,
    pub side: Side,
    /// Position within its side (the decoder numbering used in configs).
    pub number: usize,
    /// Downsampling factor of this block's feature map relative to the latent.
    pub stride: usize,
    pub channels: usize,
    pub has_self_attn: bool,
    pub has_residual: bool,
}

impl LayerDescriptor {
    /// Spatial size of the feature map for a latent of size `(h, w)`.
    pub fn resolution(&self, latent_hw: (usize, usize)) -> (usize, usize) {
        (latent_hw.0 / self.stride, latent_hw.1 / self.stride)
    }
}

/// Features of one layer during a forward pass, in `(positions, channels)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInternals {
    pub layer: LayerDescriptor,
    /// Organic residual-branch output Δφ (before any replacement).
    pub residual: Array2<f32>,
    /// Self-attention input φ.
    pub attn_in: Array2<f32>,
    /// Present on layers with self-attention.
    pub attention: Option<AttentionTrace>,
    /// Block output after attention (and cross-attention).
    pub attn_out: Array2<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerOverride {
    pub residual: Option<Array2<f32>>,
    pub attention: Option<AttentionOverride>,
}

impl LayerOverride {
    pub fn is_empty(&self) -> bool {
        self.residual.is_none() && self.attention.is_none()
    }
}

/// Per-layer replacements applied during one forward pass, keyed by global
/// layer index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InjectionDirective {
    pub layers: BTreeMap<usize, LayerOverride>,
}

impl InjectionDirective {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.values().all(LayerOverride::is_empty)
    }

    pub fn get(&self, layer: usize) -> Option<&LayerOverride> {
        self.layers.get(&layer)
    }

    pub fn set_residual(&mut self, layer: usize, t: Array2<f32>) {
        self.layers.entry(layer).or_default().residual = Some(t);
    }

    pub fn set_attention(&mut self, layer: usize, ov: AttentionOverride) {
        self.layers.entry(layer).or_default().attention = Some(ov);
    }

    /// Layers carrying a residual replacement.
    pub fn residual_layers(&self) -> Vec<usize> {
        self.layers.iter().filter(|(_, o)| o.residual.is_some()).map(|(k, _)| *k).collect()
    }

    /// Layers carrying an attention replacement, with its kind.
    pub fn attention_layers(&self) -> Vec<(usize, AttentionKind)> {
        self.layers
            .iter()
            .filter_map(|(k, o)| o.attention.as_ref().map(|a| (*k, a.kind())))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct NoisePrediction {
    pub eps: Array3<f32>,
    /// Populated only when capture was requested.
    pub internals: BTreeMap<usize, LayerInternals>,
}

/// The noise-prediction network ε_θ.
pub trait DenoiserBackend: Send + Sync {
    fn name(&self) -> &str;

    fn latent_channels(&self) -> usize;

    /// Width of each conditioning token.
    fn cond_dim(&self) -> usize;

    /// Stable ordering: encoder blocks first, then decoder blocks.
    fn list_layers(&self) -> Vec<LayerDescriptor>;

    /// Predicts the noise in `z` at training timestep `timestep`.
    ///
    /// Directives are applied before the corresponding sublayer computes.
    /// Captured internals always hold the organic projections alongside the
    /// operands actually used.
    fn predict_noise(
        &self,
        z: &Array3<f32>,
        timestep: usize,
        cond: &Array2<f32>,
        directives: &InjectionDirective,
        capture: bool,
    ) -> Result<NoisePrediction>;
}

/// Decoder layers in decoder-number order.
pub fn decoder_layers(backend: &dyn DenoiserBackend) -> Vec<LayerDescriptor> {
    backend.list_layers().into_iter().filter(|l| l.side == Side::Decoder).collect()
}

/// Maps a decoder number to its descriptor.
pub fn decoder_layer(backend: &dyn DenoiserBackend, number: usize) -> Result<LayerDescriptor> {
    decoder_layers(backend)
        .into_iter()
        .find(|l| l.number == number)
        .ok_or_else(|| Error::Config(format!("backend {} has no decoder layer {number}", backend.name())))
}

/// Wraps a backend and counts its forward passes.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: DenoiserBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: DenoiserBackend> DenoiserBackend for CountingBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn latent_channels(&self) -> usize {
        self.inner.latent_channels()
    }

    fn cond_dim(&self) -> usize {
        self.inner.cond_dim()
    }

    fn list_layers(&self) -> Vec<LayerDescriptor> {
        self.inner.list_layers()
    }

    fn predict_noise(
        &self,
        z: &Array3<f32>,
        timestep: usize,
        cond: &Array2<f32>,
        directives: &InjectionDirective,
        capture: bool,
    ) -> Result<NoisePrediction> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_noise(z, timestep, cond, directives, capture)
    }
}

impl<B: DenoiserBackend + ?Sized> DenoiserBackend for std::sync::Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn latent_channels(&self) -> usize {
        (**self).latent_channels()
    }

    fn cond_dim(&self) -> usize {
        (**self).cond_dim()
    }

    fn list_layers(&self) -> Vec<LayerDescriptor> {
        (**self).list_layers()
    }

    fn predict_noise(
        &self,
        z: &Array3<f32>,
        timestep: usize,
        cond: &Array2<f32>,
        directives: &InjectionDirective,
        capture: bool,
    ) -> Result<NoisePrediction> {
        (**self).predict_noise(z, timestep, cond, directives, capture)
    }
}

/// Constructs a backend from its configuration key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Toy(ToyUNetConfig),
    /// Pretrained networks are loaded out of process; selecting one in this
    /// build is an explicit capability error.
    External { name: String },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Toy(ToyUNetConfig::default())
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn DenoiserBackend>> {
        match self {
            BackendConfig::Toy(cfg) => Ok(Box::new(ToyUNet::new(cfg.clone())?)),
            BackendConfig::External { name } => Err(Error::Capability(format!("denoiser backend '{name}'"))),
        }
    }
}
