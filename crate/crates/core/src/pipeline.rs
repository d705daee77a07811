//! End-to-end style transfer: encode, condition, invert both branches, then
//! denoise the target branch with per-step content or style injection.

use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, ImageAsset, ImageRole, LatentCodec};
use crate::conditioning::{Conditioner, ConditioningBundle, ConditioningConfig, StyleEmbedding};
use crate::ddim::{cfg_combine, ddim_step, extend_inversion};
use crate::denoiser::{AttentionKind, BackendConfig, DenoiserBackend, InjectionDirective};
use crate::error::{Error, Result};
use crate::injection::{
    capture_bank, content_directive, select_injection, steps_for, style_directive, FeatureBank, InjectionConfig,
    InjectionMode, InjectionPlan,
};
use crate::latent::{Branch, Latent, LatentTrajectory};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

/// Everything that does not vary between jobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EngineConfig {
    pub schedule: ScheduleConfig,
    pub backend: BackendConfig,
    pub codec: CodecConfig,
    pub conditioning: ConditioningConfig,
}

#[derive(Debug, Clone)]
pub struct TransferJob {
    pub content: ImageAsset,
    pub style: ImageAsset,
    pub config: InjectionConfig,
    pub content_prompt: String,
    pub edit_prompt: Option<String>,
    /// Seeds the codec and the stub encoders.
    pub seed: u64,
    /// Replaces the style encoder's output when set.
    pub style_embedding: Option<StyleEmbedding>,
    pub keep_banks: bool,
    pub keep_latents: bool,
}

impl TransferJob {
    pub fn new(content: ImageAsset, style: ImageAsset, config: InjectionConfig) -> Self {
        Self {
            content: content.with_role(ImageRole::Content),
            style: style.with_role(ImageRole::Style),
            config,
            content_prompt: String::new(),
            edit_prompt: None,
            seed: 0,
            style_embedding: None,
            keep_banks: false,
            keep_latents: false,
        }
    }

    pub fn with_params(content: ImageAsset, style: ImageAsset, params: &JobParams) -> Self {
        let mut job = Self::new(content, style, params.config.clone());
        job.content_prompt = params.content_prompt.clone();
        job.edit_prompt = params.edit_prompt.clone();
        job.seed = params.seed;
        job
    }
}

/// Serializable job parameters (everything except the images).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobParams {
    pub schema_version: u32,
    #[serde(flatten)]
    pub config: InjectionConfig,
    pub content_prompt: String,
    pub edit_prompt: Option<String>,
    pub seed: u64,
}

pub const JOB_SCHEMA_VERSION: u32 = 1;

impl Default for JobParams {
    fn default() -> Self {
        Self {
            schema_version: JOB_SCHEMA_VERSION,
            config: InjectionConfig::default(),
            content_prompt: String::new(),
            edit_prompt: None,
            seed: 0,
        }
    }
}

impl JobParams {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != JOB_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported job schema version {}", self.schema_version)));
        }
        self.config.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Content,
    Style,
    /// Style phase with style injection disabled.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub timestep: usize,
    pub mode: StepMode,
    /// Decoder numbers that received residual replacement.
    pub residual_layers: Vec<usize>,
    /// Decoder numbers that received attention replacement.
    pub attention_layers: Vec<usize>,
    pub attention_kind: Option<AttentionKind>,
    pub branch_evaluations: usize,
    pub target_evaluations: usize,
    pub micros: u64,
}

/// Conditioning of the target branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetConditioning {
    /// Content prompt concatenated with the text-aligned style embedding.
    ContentAndStyle,
    ContentOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunStats {
    pub inversion_evaluations: usize,
    pub branch_evaluations: usize,
    pub target_evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub output: ImageAsset,
    /// One entry per target step, from `T` down to 1.
    pub trace: Vec<StepTrace>,
    pub stats: RunStats,
    pub alpha: f64,
    pub deciding_point: usize,
    pub target_conditioning: TargetConditioning,
    pub latents: Option<LatentTrajectory>,
    pub content_bank: Option<FeatureBank>,
    pub style_bank: Option<FeatureBank>,
}

impl TransferResult {
    pub fn count(&self, mode: StepMode) -> usize {
        self.trace.iter().filter(|s| s.mode == mode).count()
    }

    pub fn trace_json(&self) -> serde_json::Value {
        serde_json::json!({
            "alpha": self.alpha,
            "deciding_point": self.deciding_point,
            "target_conditioning": self.target_conditioning,
            "stats": self.stats,
            "steps": self.trace,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

/// Branch inversions shared between runs over the same inputs.
#[derive(Debug, Clone)]
pub struct InversionCache {
    content: LatentTrajectory,
    style: LatentTrajectory,
    content_z0: Latent,
    style_z0: Latent,
    pub content_inversions: usize,
    pub style_inversions: usize,
    pub evaluations: usize,
}

impl InversionCache {
    fn new(content_z0: Latent, style_z0: Latent) -> Self {
        Self {
            content: LatentTrajectory::new(Branch::Content),
            style: LatentTrajectory::new(Branch::Style),
            content_z0,
            style_z0,
            content_inversions: 0,
            style_inversions: 0,
            evaluations: 0,
        }
    }

    /// Extends the branch chain so it covers `1..=t_hi`; returns backend calls made.
    fn ensure(&mut self, branch: Branch, t_hi: usize, backend: &dyn DenoiserBackend, null: &Array2<f32>, s: &NoiseSchedule) -> Result<usize> {
        let (traj, z0, counter) = match branch {
            Branch::Content => (&mut self.content, &self.content_z0, &mut self.content_inversions),
            _ => (&mut self.style, &self.style_z0, &mut self.style_inversions),
        };
        let have = traj.steps().last().unwrap_or(0);
        if t_hi <= have {
            return Ok(0);
        }
        let start = if have == 0 { z0.clone() } else { traj.require(have)?.clone() };
        extend_inversion(traj, &start, have + 1, t_hi, backend, null, s)?;
        *counter += 1;
        let calls = t_hi - have;
        self.evaluations += calls;
        Ok(calls)
    }
}

/// Results of an α sweep plus the inversion-cache statistics.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub results: Vec<TransferResult>,
    pub content_inversions: usize,
    pub style_inversions: usize,
    pub inversion_evaluations: usize,
}

pub struct Engine {
    cfg: EngineConfig,
    backend: Arc<dyn DenoiserBackend>,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        let backend: Arc<dyn DenoiserBackend> = Arc::from(cfg.backend.build()?);
        Self::with_backend(cfg, backend)
    }

    pub fn with_backend(cfg: EngineConfig, backend: Arc<dyn DenoiserBackend>) -> Result<Self> {
        if cfg.codec.latent_channels() != backend.latent_channels() {
            return Err(Error::Config(format!(
                "codec yields {} latent channels, backend expects {}",
                cfg.codec.latent_channels(),
                backend.latent_channels()
            )));
        }
        if cfg.conditioning.dim != backend.cond_dim() {
            return Err(Error::Config(format!(
                "conditioning width {} differs from backend width {}",
                cfg.conditioning.dim,
                backend.cond_dim()
            )));
        }
        Ok(Self { cfg, backend })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &Arc<dyn DenoiserBackend> {
        &self.backend
    }

    pub fn schedule_for(&self, steps: usize) -> Result<NoiseSchedule> {
        ScheduleConfig { sample_steps: steps, ..self.cfg.schedule.clone() }.build()
    }

    /// Checks a job against the engine without running it: configuration,
    /// image sizes, conditioning and one backend evaluation on the content latent.
    pub fn validate_job(&self, job: &TransferJob) -> Result<()> {
        let prep = self.prepare(job)?;
        InjectionPlan::new(&job.config, self.backend.as_ref())?;
        let s = self.schedule_for(job.config.sample_steps)?;
        let null = &prep.bundle.null_embedding.tokens;
        self.backend.predict_noise(prep.z_content.data(), s.train_timestep(1)?, null, &InjectionDirective::none(), false)?;
        Ok(())
    }

    /// Encodes `img` and inverts it with the null condition up to step `t_hi`
    /// of a `steps`-step schedule.
    pub fn invert_image(&self, img: &ImageAsset, branch: Branch, steps: usize, t_hi: usize, seed: u64) -> Result<LatentTrajectory> {
        let s = self.schedule_for(steps)?;
        let codec = self.cfg.codec.build(seed)?;
        let z0 = codec.encode(img, branch)?;
        let null = Conditioner::new(self.cfg.conditioning.clone(), seed)?.null_embedding()?;
        crate::ddim::invert_trajectory(&z0, 1, t_hi, self.backend.as_ref(), &null.tokens, &s)
    }

    pub fn run_style_transfer(&self, job: &TransferJob) -> Result<TransferResult> {
        self.run_with_progress(job, &mut |_| {})
    }

    pub fn run_with_progress(&self, job: &TransferJob, progress: &mut dyn FnMut(Progress)) -> Result<TransferResult> {
        let prep = self.prepare(job)?;
        let mut cache = InversionCache::new(prep.z_content.clone(), prep.z_style.clone());
        self.run_prepared(job, &prep, &mut cache, progress)
    }

    /// Text-guided editing: the edit prompt replaces the content prompt.
    pub fn run_edit(&self, job: &TransferJob) -> Result<TransferResult> {
        match job.edit_prompt.as_deref() {
            Some(p) if !p.trim().is_empty() => self.run_style_transfer(job),
            _ => Err(Error::Config("run_edit needs a non-empty edit prompt".into())),
        }
    }

    /// Image-to-image translation: the reference image takes the style slot.
    pub fn run_translation(&self, content: &ImageAsset, reference: &ImageAsset, config: &InjectionConfig, seed: u64) -> Result<TransferResult> {
        let mut job = TransferJob::new(content.clone(), reference.clone(), config.clone());
        job.seed = seed;
        self.run_style_transfer(&job)
    }

    /// Runs one job per α, reusing the branch inversions across runs.
    pub fn sweep_alpha(&self, job: &TransferJob, alphas: &[f64]) -> Result<SweepResult> {
        for a in alphas {
            if !(0.0..=1.0).contains(a) {
                return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
            }
        }
        let prep = self.prepare(job)?;
        let mut cache = InversionCache::new(prep.z_content.clone(), prep.z_style.clone());
        let mut results = Vec::with_capacity(alphas.len());
        for a in alphas {
            let mut j = job.clone();
            j.config.alpha = *a;
            results.push(self.run_prepared(&j, &prep, &mut cache, &mut |_| {})?);
        }
        Ok(SweepResult {
            results,
            content_inversions: cache.content_inversions,
            style_inversions: cache.style_inversions,
            inversion_evaluations: cache.evaluations,
        })
    }

    fn prepare(&self, job: &TransferJob) -> Result<Prepared> {
        job.config.validate()?;
        if (job.content.height(), job.content.width()) != (job.style.height(), job.style.width()) {
            return Err(Error::Shape(format!(
                "content is {}x{}, style is {}x{}; resize the style image first",
                job.content.height(),
                job.content.width(),
                job.style.height(),
                job.style.width()
            )));
        }
        let codec = self.cfg.codec.build(job.seed).map_err(|e| e.at_stage("encode", 0))?;
        let z_content = codec.encode(&job.content, Branch::Content).map_err(|e| e.at_stage("encode", 0))?;
        let z_style = codec.encode(&job.style.clone().with_role(ImageRole::Style), Branch::Style).map_err(|e| e.at_stage("encode", 0))?;
        let conditioner = Conditioner::new(self.cfg.conditioning.clone(), job.seed).map_err(|e| e.at_stage("conditioning", 0))?;
        let bundle = match &job.style_embedding {
            Some(v_s) => conditioner.build_bundle_with_style(&job.content_prompt, v_s.clone(), job.edit_prompt.as_deref()),
            None => conditioner.build_bundle(&job.content_prompt, &job.style, job.edit_prompt.as_deref()),
        }
        .map_err(|e| e.at_stage("conditioning", 0))?;
        Ok(Prepared { codec, z_content, z_style, bundle })
    }

    fn run_prepared(
        &self,
        job: &TransferJob,
        prep: &Prepared,
        cache: &mut InversionCache,
        progress: &mut dyn FnMut(Progress),
    ) -> Result<TransferResult> {
        let backend = self.backend.as_ref();
        let plan = InjectionPlan::new(&job.config, backend)?;
        let cfg = &plan.config;
        let s = self.schedule_for(cfg.sample_steps)?;
        let steps = s.sample_steps();
        let t_alpha = plan.deciding_point();
        let null = &prep.bundle.null_embedding.tokens;
        let target_cond = if cfg.style_text { prep.bundle.v_st.clone() } else { prep.bundle.v_c.tokens.clone() };

        let content_steps = steps_for(InjectionMode::Content, t_alpha, steps, cfg.injection_order);
        let style_steps = steps_for(InjectionMode::Style, t_alpha, steps, cfg.injection_order);

        // ẑ_T starts from the inverted content latent, so the content chain
        // always reaches T; the style chain only as far as its injection range
        let mut stats = RunStats::default();
        stats.inversion_evaluations += cache.ensure(Branch::Content, steps, backend, null, &s)?;
        if cfg.style_injection && !style_steps.is_empty() {
            stats.inversion_evaluations += cache.ensure(Branch::Style, *style_steps.end(), backend, null, &s)?;
        }
        let content_traj = &cache.content;
        let style_traj = &cache.style;

        let mut z = content_traj.require(steps)?.data().clone();
        let mut trace = Vec::with_capacity(steps);
        let mut latents = job.keep_latents.then(|| LatentTrajectory::new(Branch::Target));
        let mut content_bank = job.keep_banks.then(|| FeatureBank::new(Branch::Content)).transpose()?;
        let mut style_bank = job.keep_banks.then(|| FeatureBank::new(Branch::Style)).transpose()?;

        for t in (1..=steps).rev() {
            let started = Instant::now();
            let ts = s.train_timestep(t)?;
            let mode = select_injection(t, t_alpha, cfg.injection_order);
            debug_assert_eq!(mode == InjectionMode::Content, content_steps.contains(&t));

            let (directive, step_mode, branch_evals) = match mode {
                InjectionMode::Content => {
                    let bank = capture_bank(Branch::Content, content_traj, backend, t..=t, &plan, null, &s)?;
                    let d = content_directive(&bank, t, &plan).map_err(|e| e.at_stage("inject", t))?;
                    if let Some(b) = content_bank.as_mut() {
                        b.merge(bank)?;
                    }
                    (d, StepMode::Content, 1)
                }
                InjectionMode::Style if cfg.style_injection => {
                    let bank = capture_bank(Branch::Style, style_traj, backend, t..=t, &plan, null, &s)?;
                    let d = style_directive(&bank, t, &plan).map_err(|e| e.at_stage("inject", t))?;
                    if let Some(b) = style_bank.as_mut() {
                        b.merge(bank)?;
                    }
                    (d, StepMode::Style, 1)
                }
                InjectionMode::Style => (InjectionDirective::none(), StepMode::Plain, 0),
            };

            let cond = backend
                .predict_noise(&z, ts, &target_cond, &directive, false)
                .map_err(|e| e.at_stage("denoise", t))?;
            let mut target_evals = 1;
            let eps = if cfg.cfg_scale == 1.0 {
                cond.eps
            } else {
                // injections apply to the unconditional pass as well
                let uncond = backend
                    .predict_noise(&z, ts, null, &directive, false)
                    .map_err(|e| e.at_stage("denoise", t))?;
                target_evals += 1;
                cfg_combine(&uncond.eps, &cond.eps, cfg.cfg_scale)?
            };
            z = ddim_step(&z, &eps, t, t - 1, &s).map_err(|e| e.at_stage("denoise", t))?;
            if let Some(l) = latents.as_mut() {
                l.insert(Latent::new(z.clone(), t - 1, Branch::Target).map_err(|e| e.at_stage("denoise", t))?)?;
            }

            let numbers = |idx: usize| plan.attn.iter().chain(&plan.residual).find(|l| l.index == idx).map(|l| l.number).unwrap_or(idx);
            let attention = directive.attention_layers();
            stats.branch_evaluations += branch_evals;
            stats.target_evaluations += target_evals;
            trace.push(StepTrace {
                step: t,
                timestep: ts,
                mode: step_mode,
                residual_layers: directive.residual_layers().into_iter().map(numbers).collect(),
                attention_layers: attention.iter().map(|(i, _)| numbers(*i)).collect(),
                attention_kind: attention.first().map(|(_, k)| *k),
                branch_evaluations: branch_evals,
                target_evaluations: target_evals,
                micros: started.elapsed().as_micros() as u64,
            });
            progress(Progress { done: steps - t + 1, total: steps });
        }

        let z0 = Latent::new(z, 0, Branch::Target).map_err(|e| e.at_stage("decode", 0))?;
        let output = prep.codec.decode(&z0).map_err(|e| e.at_stage("decode", 0))?;
        Ok(TransferResult {
            output,
            trace,
            stats,
            alpha: cfg.alpha,
            deciding_point: t_alpha,
            target_conditioning: if cfg.style_text { TargetConditioning::ContentAndStyle } else { TargetConditioning::ContentOnly },
            latents,
            content_bank,
            style_bank,
        })
    }
}

struct Prepared {
    codec: LatentCodec,
    z_content: Latent,
    z_style: Latent,
    bundle: ConditioningBundle,
}
