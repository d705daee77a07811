//! Python bindings: images, injection configs, the transfer engine and the
//! evaluation metrics.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use styleinject_core::codec::{ImageAsset, ImageRole};
use styleinject_core::denoiser::{BackendConfig, ToyUNetConfig};
use styleinject_core::injection::{self, ContentAttention, InjectionConfig, InjectionOrder};
use styleinject_core::latent::Branch;
use styleinject_core::metrics::{self, FeatureExtractor};
use styleinject_core::pipeline::{self, EngineConfig, StepMode, TransferJob};
use styleinject_core::Error;

fn to_py(e: Error) -> PyErr {
    match &e {
        Error::Io { .. } | Error::Image(_) | Error::Csv(_) => PyIOError::new_err(e.to_string()),
        Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ if e.is_user_error() => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_order(s: &str) -> PyResult<InjectionOrder> {
    match s {
        "content_first" => Ok(InjectionOrder::ContentFirst),
        "style_first" => Ok(InjectionOrder::StyleFirst),
        _ => Err(PyValueError::new_err(format!("order must be content_first or style_first, got {s:?}"))),
    }
}

fn parse_content_attention(s: &str) -> PyResult<ContentAttention> {
    match s {
        "query_key" => Ok(ContentAttention::QueryKey),
        "key_value" => Ok(ContentAttention::KeyValue),
        "off" => Ok(ContentAttention::Off),
        _ => Err(PyValueError::new_err(format!("content_attention must be query_key, key_value or off, got {s:?}"))),
    }
}

fn json_name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// An RGB image with values in [0, 1].
#[pyclass(name = "Image", module = "styleinject", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: ImageAsset,
}

#[pymethods]
impl PyImage {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ImageAsset::load_png(&path, ImageRole::Content).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: ImageAsset::from_image_bytes(data, ImageRole::Content).map_err(to_py)? })
    }

    #[staticmethod]
    fn solid(height: usize, width: usize, rgb: [f32; 3]) -> PyResult<Self> {
        Ok(Self { inner: ImageAsset::solid(height, width, rgb, ImageRole::Content).map_err(to_py)? })
    }

    /// Builds an image from a flat channel-major `[3 * h * w]` list.
    #[staticmethod]
    fn from_pixels(height: usize, width: usize, values: Vec<f32>) -> PyResult<Self> {
        let px = styleinject_core::codec::pixels_from_vec(height, width, values).map_err(to_py)?;
        Ok(Self { inner: ImageAsset::new(px, ImageRole::Content).map_err(to_py)? })
    }

    #[getter]
    fn size(&self) -> (usize, usize) {
        (self.inner.height(), self.inner.width())
    }

    /// Channel-major flat pixel values.
    fn pixels(&self) -> Vec<f32> {
        self.inner.pixels().iter().copied().collect()
    }

    fn resized(&self, height: usize, width: usize) -> PyResult<Self> {
        Ok(Self { inner: self.inner.resized(height, width).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).map_err(to_py)
    }

    fn to_png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_png_bytes().map_err(to_py)?))
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Injection hyper-parameters; defaults follow the method's reference setting.
#[pyclass(name = "InjectionConfig", module = "styleinject", skip_from_py_object)]
#[derive(Clone)]
struct PyInjectionConfig {
    inner: InjectionConfig,
}

#[pymethods]
impl PyInjectionConfig {
    #[new]
    #[pyo3(signature = (alpha=None, sample_steps=None, cfg_scale=None, attn_layers=None, residual_layers=None, order=None, content_attention=None, content_residual=None, style_injection=None, style_text=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        alpha: Option<f64>,
        sample_steps: Option<usize>,
        cfg_scale: Option<f32>,
        attn_layers: Option<BTreeSet<usize>>,
        residual_layers: Option<BTreeSet<usize>>,
        order: Option<&str>,
        content_attention: Option<&str>,
        content_residual: Option<bool>,
        style_injection: Option<bool>,
        style_text: Option<bool>,
    ) -> PyResult<Self> {
        let mut c = InjectionConfig::default();
        if let Some(v) = alpha {
            c.alpha = v;
        }
        if let Some(v) = sample_steps {
            c.sample_steps = v;
        }
        if let Some(v) = cfg_scale {
            c.cfg_scale = v;
        }
        if let Some(v) = attn_layers {
            c.attn_layers = v;
        }
        if let Some(v) = residual_layers {
            c.residual_layers = v;
        }
        if let Some(v) = order {
            c.injection_order = parse_order(v)?;
        }
        if let Some(v) = content_attention {
            c.content_attention = parse_content_attention(v)?;
        }
        if let Some(v) = content_residual {
            c.content_residual = v;
        }
        if let Some(v) = style_injection {
            c.style_injection = v;
        }
        if let Some(v) = style_text {
            c.style_text = v;
        }
        c.validate().map_err(to_py)?;
        Ok(Self { inner: c })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: InjectionConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[setter]
    fn set_alpha(&mut self, v: f64) -> PyResult<()> {
        injection::deciding_point(v, self.inner.sample_steps).map_err(to_py)?;
        self.inner.alpha = v;
        Ok(())
    }

    #[getter]
    fn sample_steps(&self) -> usize {
        self.inner.sample_steps
    }

    #[getter]
    fn cfg_scale(&self) -> f32 {
        self.inner.cfg_scale
    }

    #[getter]
    fn attn_layers(&self) -> Vec<usize> {
        self.inner.attn_layers.iter().copied().collect()
    }

    #[getter]
    fn residual_layers(&self) -> Vec<usize> {
        self.inner.residual_layers.iter().copied().collect()
    }

    #[getter]
    fn order(&self) -> String {
        json_name(&self.inner.injection_order)
    }

    #[getter]
    fn content_attention(&self) -> String {
        json_name(&self.inner.content_attention)
    }

    fn deciding_point(&self) -> PyResult<usize> {
        self.inner.deciding_point().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("InjectionConfig({})", self.to_json())
    }
}

#[pyclass(name = "TransferResult", module = "styleinject", frozen)]
struct PyTransferResult {
    inner: pipeline::TransferResult,
}

#[pymethods]
impl PyTransferResult {
    #[getter]
    fn image(&self) -> PyImage {
        PyImage { inner: self.inner.output.clone() }
    }

    #[getter]
    fn deciding_point(&self) -> usize {
        self.inner.deciding_point
    }

    /// Mode of each target step from `T` down to 1: "content", "style" or "plain".
    fn modes(&self) -> Vec<String> {
        self.inner.trace.iter().map(|s| json_name(&s.mode)).collect()
    }

    fn counts(&self) -> (usize, usize, usize) {
        let r = &self.inner;
        (r.count(StepMode::Content), r.count(StepMode::Style), r.count(StepMode::Plain))
    }

    /// `(inversion, branch, target)` backend evaluations.
    fn evaluations(&self) -> (usize, usize, usize) {
        let s = self.inner.stats;
        (s.inversion_evaluations, s.branch_evaluations, s.target_evaluations)
    }

    fn trace_json(&self) -> String {
        self.inner.trace_json().to_string()
    }
}

/// Style-transfer engine on the built-in toy U-Net.
#[pyclass(name = "Engine", module = "styleinject", frozen)]
struct PyEngine {
    inner: pipeline::Engine,
}

impl PyEngine {
    fn job(
        content: &PyImage,
        style: &PyImage,
        config: Option<&PyInjectionConfig>,
        prompt: &str,
        edit_prompt: Option<String>,
        seed: u64,
    ) -> TransferJob {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        let mut job = TransferJob::new(content.inner.clone(), style.inner.clone(), cfg);
        job.content_prompt = prompt.to_string();
        job.edit_prompt = edit_prompt;
        job.seed = seed;
        job
    }
}

#[pymethods]
impl PyEngine {
    #[new]
    #[pyo3(signature = (toy_seed=0, channels=None, patch=None))]
    fn new(toy_seed: u64, channels: Option<usize>, patch: Option<usize>) -> PyResult<Self> {
        let mut toy = ToyUNetConfig { seed: toy_seed, ..Default::default() };
        if let Some(c) = channels {
            toy.channels = c;
        }
        if let Some(p) = patch {
            toy.patch = p;
        }
        let cfg = EngineConfig { backend: BackendConfig::Toy(toy), ..Default::default() };
        Ok(Self { inner: pipeline::Engine::new(cfg).map_err(to_py)? })
    }

    /// Global layer table as `(index, side, number, stride, has_self_attn)`.
    fn layers(&self) -> Vec<(usize, String, usize, usize, bool)> {
        self.inner
            .backend()
            .list_layers()
            .into_iter()
            .map(|l| (l.index, json_name(&l.side), l.number, l.stride, l.has_self_attn))
            .collect()
    }

    #[pyo3(signature = (content, style, config=None, prompt="", edit_prompt=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn transfer(
        &self,
        py: Python<'_>,
        content: &PyImage,
        style: &PyImage,
        config: Option<&PyInjectionConfig>,
        prompt: &str,
        edit_prompt: Option<String>,
        seed: u64,
    ) -> PyResult<PyTransferResult> {
        let job = Self::job(content, style, config, prompt, edit_prompt, seed);
        let inner = py.detach(|| self.inner.run_style_transfer(&job)).map_err(to_py)?;
        Ok(PyTransferResult { inner })
    }

    /// One transfer per α; returns the results and the number of content inversions.
    #[pyo3(signature = (content, style, alphas, config=None, prompt="", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn sweep(
        &self,
        py: Python<'_>,
        content: &PyImage,
        style: &PyImage,
        alphas: Vec<f64>,
        config: Option<&PyInjectionConfig>,
        prompt: &str,
        seed: u64,
    ) -> PyResult<(Vec<PyTransferResult>, usize)> {
        let job = Self::job(content, style, config, prompt, None, seed);
        let sweep = py.detach(|| self.inner.sweep_alpha(&job, &alphas)).map_err(to_py)?;
        let n = sweep.content_inversions;
        Ok((sweep.results.into_iter().map(|inner| PyTransferResult { inner }).collect(), n))
    }

    /// Inverted latents `z_1..z_{t_hi}`, each as a flat channel-major list.
    #[pyo3(signature = (image, steps=50, t_hi=None, seed=0))]
    fn invert(&self, py: Python<'_>, image: &PyImage, steps: usize, t_hi: Option<usize>, seed: u64) -> PyResult<Vec<Vec<f32>>> {
        let t_hi = t_hi.unwrap_or(steps);
        let traj = py.detach(|| self.inner.invert_image(&image.inner, Branch::Content, steps, t_hi, seed)).map_err(to_py)?;
        Ok(traj.iter().map(|l| l.data().iter().copied().collect()).collect())
    }
}

#[pyfunction]
fn deciding_point(alpha: f64, steps: usize) -> PyResult<usize> {
    injection::deciding_point(alpha, steps).map_err(to_py)
}

#[pyfunction]
fn pixel_mse(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::pixel_mse(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (generated, content, seed=0))]
fn content_loss(generated: &PyImage, content: &PyImage, seed: u64) -> PyResult<f64> {
    metrics::content_loss(&generated.inner, &content.inner, &FeatureExtractor::toy(seed)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (generated, style, seed=0, pointwise=false))]
fn style_loss(generated: &PyImage, style: &PyImage, seed: u64, pointwise: bool) -> PyResult<f64> {
    let fx = if pointwise { FeatureExtractor::pointwise(seed) } else { FeatureExtractor::toy(seed) };
    metrics::style_loss(&generated.inner, &style.inner, &fx).map_err(to_py)
}

#[pymodule]
fn styleinject(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyInjectionConfig>()?;
    m.add_class::<PyEngine>()?;
    m.add_class::<PyTransferResult>()?;
    m.add_function(wrap_pyfunction!(deciding_point, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_mse, m)?)?;
    m.add_function(wrap_pyfunction!(content_loss, m)?)?;
    m.add_function(wrap_pyfunction!(style_loss, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn option_names_round_trip() {
        for s in ["content_first", "style_first"] {
            assert_eq!(json_name(&parse_order(s).unwrap()), s);
        }
        for s in ["query_key", "key_value", "off"] {
            assert_eq!(json_name(&parse_content_attention(s).unwrap()), s);
        }
    }
}
