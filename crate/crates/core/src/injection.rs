//! Content/style feature banks and the per-step injection directives built
//! from them.
//!
//! Steps `t > t^α` take content injection (residual replacement on the
//! residual layers plus query/key replacement on the attention layers); steps
//! `t ≤ t^α` take style injection (key/value replacement only). The
//! `StyleFirst` order swaps the two phases.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionKind, AttentionOverride, DenoiserBackend, InjectionDirective, LayerDescriptor, Side};
use crate::error::{Error, Result};
use crate::latent::{Branch, LatentTrajectory};
use crate::schedule::NoiseSchedule;
use crate::tensor_io::TensorStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InjectionOrder {
    #[default]
    ContentFirst,
    StyleFirst,
}

/// Which self-attention operands content injection replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContentAttention {
    #[default]
    QueryKey,
    KeyValue,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    Content,
    Style,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub alpha: f64,
    /// Decoder layers receiving attention replacement (`l`).
    pub attn_layers: BTreeSet<usize>,
    /// Decoder layers receiving residual replacement (`l'`).
    pub residual_layers: BTreeSet<usize>,
    pub cfg_scale: f32,
    pub sample_steps: usize,
    pub injection_order: InjectionOrder,
    pub content_attention: ContentAttention,
    pub content_residual: bool,
    pub style_injection: bool,
    /// Append the style image's text-aligned embedding to the condition.
    pub style_text: bool,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            attn_layers: (4..=11).collect(),
            residual_layers: (3..=8).collect(),
            cfg_scale: 7.5,
            sample_steps: 50,
            injection_order: InjectionOrder::ContentFirst,
            content_attention: ContentAttention::QueryKey,
            content_residual: true,
            style_injection: true,
            style_text: true,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.sample_steps == 0 {
            return Err(Error::Config("sample_steps must be positive".into()));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Config("cfg_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn deciding_point(&self) -> Result<usize> {
        deciding_point(self.alpha, self.sample_steps)
    }
}

/// `t^α = ⌊α·T⌋`, with a small tolerance so that products such as
/// `0.29 · 100` land on the intended integer.
pub fn deciding_point(alpha: f64, steps: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if steps == 0 {
        return Err(Error::Config("sample_steps must be positive".into()));
    }
    Ok(((alpha * steps as f64 + 1e-9).floor() as usize).min(steps))
}

pub fn select_injection(t: usize, t_alpha: usize, order: InjectionOrder) -> InjectionMode {
    let late = t > t_alpha;
    match (order, late) {
        (InjectionOrder::ContentFirst, true) | (InjectionOrder::StyleFirst, false) => InjectionMode::Content,
        _ => InjectionMode::Style,
    }
}

/// Sample steps assigned to `mode`, as an inclusive range (possibly empty).
pub fn steps_for(mode: InjectionMode, t_alpha: usize, steps: usize, order: InjectionOrder) -> RangeInclusive<usize> {
    let early = 1..=t_alpha;
    let late = t_alpha + 1..=steps;
    match (order, mode) {
        (InjectionOrder::ContentFirst, InjectionMode::Content) | (InjectionOrder::StyleFirst, InjectionMode::Style) => late,
        _ => early,
    }
}

/// An [`InjectionConfig`] resolved against a backend's layer table.
#[derive(Debug, Clone)]
pub struct InjectionPlan {
    pub config: InjectionConfig,
    pub attn: Vec<LayerDescriptor>,
    pub residual: Vec<LayerDescriptor>,
}

impl InjectionPlan {
    pub fn new(config: &InjectionConfig, backend: &dyn DenoiserBackend) -> Result<Self> {
        config.validate()?;
        let decoder: BTreeMap<usize, LayerDescriptor> = backend
            .list_layers()
            .into_iter()
            .filter(|l| l.side == Side::Decoder)
            .map(|l| (l.number, l))
            .collect();
        let pick = |set: &BTreeSet<usize>, need_attn: bool| -> Result<Vec<LayerDescriptor>> {
            set.iter()
                .map(|n| {
                    let l = decoder
                        .get(n)
                        .ok_or_else(|| Error::Config(format!("decoder layer {n} does not exist")))?;
                    if need_attn && !l.has_self_attn {
                        return Err(Error::Config(format!("decoder layer {n} has no self-attention")));
                    }
                    if !need_attn && !l.has_residual {
                        return Err(Error::Config(format!("decoder layer {n} has no residual block")));
                    }
                    Ok(l.clone())
                })
                .collect()
        };
        Ok(Self {
            attn: pick(&config.attn_layers, true)?,
            residual: pick(&config.residual_layers, false)?,
            config: config.clone(),
        })
    }

    pub fn deciding_point(&self) -> usize {
        self.config.deciding_point().expect("validated")
    }
}

/// Features of one layer at one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BankEntry {
    pub residual: Option<Array2<f32>>,
    pub q: Option<Array2<f32>>,
    pub k: Option<Array2<f32>>,
    pub v: Option<Array2<f32>>,
}

/// Captured branch features keyed by `(sample step, global layer index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    branch: Branch,
    steps: BTreeSet<usize>,
    store: BTreeMap<(usize, usize), BankEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankMeta {
    branch: Branch,
    steps: Vec<usize>,
    layers: Vec<usize>,
}

impl FeatureBank {
    pub fn new(branch: Branch) -> Result<Self> {
        if branch == Branch::Target {
            return Err(Error::Config("feature banks belong to the content or style branch".into()));
        }
        Ok(Self { branch, steps: BTreeSet::new(), store: BTreeMap::new() })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn steps(&self) -> &BTreeSet<usize> {
        &self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn entry(&self, step: usize, layer: usize) -> Option<&BankEntry> {
        self.store.get(&(step, layer))
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.store.keys().map(|(_, l)| *l).collect()
    }

    /// Absorbs another bank of the same branch; overlapping steps are an error.
    pub fn merge(&mut self, other: FeatureBank) -> Result<()> {
        if other.branch != self.branch {
            return Err(Error::Config(format!("cannot merge a {} bank into a {} bank", other.branch, self.branch)));
        }
        if let Some(t) = other.steps.iter().find(|t| self.steps.contains(t)) {
            return Err(Error::Config(format!("step {t} captured twice")));
        }
        self.steps.extend(other.steps);
        self.store.extend(other.store);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut store = TensorStore::new();
        for ((t, l), e) in &self.store {
            for (name, tensor) in [("residual", &e.residual), ("q", &e.q), ("k", &e.k), ("v", &e.v)] {
                if let Some(x) = tensor {
                    store.insert(format!("t{t:04}/l{l:03}/{name}"), x.clone().into_dyn());
                }
            }
        }
        let meta = BankMeta {
            branch: self.branch,
            steps: self.steps.iter().copied().collect(),
            layers: self.layers().into_iter().collect(),
        };
        store.save(dir, "feature_bank", serde_json::to_value(meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, manifest) = TensorStore::load(dir)?;
        if manifest.kind != "feature_bank" {
            return Err(Error::Config(format!("expected a feature_bank dump, found {}", manifest.kind)));
        }
        let meta: BankMeta = serde_json::from_value(manifest.meta)?;
        let mut bank = FeatureBank::new(meta.branch)?;
        bank.steps = meta.steps.into_iter().collect();
        for (name, t) in store.tensors {
            let mut parts = name.split('/');
            let parse = |p: Option<&str>, prefix: char| -> Result<usize> {
                p.and_then(|s| s.strip_prefix(prefix))
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Config(format!("malformed bank tensor name {name}")))
            };
            let step = parse(parts.next(), 't')?;
            let layer = parse(parts.next(), 'l')?;
            let t2 = t.into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?;
            let e = bank.store.entry((step, layer)).or_default();
            match parts.next() {
                Some("residual") => e.residual = Some(t2),
                Some("q") => e.q = Some(t2),
                Some("k") => e.k = Some(t2),
                Some("v") => e.v = Some(t2),
                _ => return Err(Error::Config(format!("malformed bank tensor name {name}"))),
            }
        }
        Ok(bank)
    }
}

/// Runs the branch denoiser on the inversion latents `z*_t` for every step in
/// `steps` under the null condition and stores the plan's layers.
///
/// The content branch stores residuals for the residual layers and Q/K/V for
/// the attention layers; the style branch stores Q/K/V only.
pub fn capture_bank(
    branch: Branch,
    trajectory: &LatentTrajectory,
    backend: &dyn DenoiserBackend,
    steps: RangeInclusive<usize>,
    plan: &InjectionPlan,
    null_cond: &Array2<f32>,
    schedule: &NoiseSchedule,
) -> Result<FeatureBank> {
    if trajectory.branch() != branch {
        return Err(Error::Config(format!("{} trajectory cannot feed a {branch} bank", trajectory.branch())));
    }
    let mut bank = FeatureBank::new(branch)?;
    let none = InjectionDirective::none();
    for t in steps {
        let z = trajectory.require(t)?;
        let pred = backend
            .predict_noise(z.data(), schedule.train_timestep(t)?, null_cond, &none, true)
            .map_err(|e| e.at_stage("capture", t))?;
        for layer in &plan.attn {
            let li = pred.internals.get(&layer.index).ok_or(Error::MissingStep { step: t })?;
            let tr = li
                .attention
                .as_ref()
                .ok_or_else(|| Error::Config(format!("layer {} captured without attention", layer.index)))?;
            let e = bank.store.entry((t, layer.index)).or_default();
            e.q = Some(tr.q.clone());
            e.k = Some(tr.k.clone());
            e.v = Some(tr.v.clone());
        }
        if branch == Branch::Content {
            for layer in &plan.residual {
                let li = pred.internals.get(&layer.index).ok_or(Error::MissingStep { step: t })?;
                bank.store.entry((t, layer.index)).or_default().residual = Some(li.residual.clone());
            }
        }
        bank.steps.insert(t);
    }
    Ok(bank)
}

fn take(e: &BankEntry, which: &str, layer: usize, step: usize) -> Result<Array2<f32>> {
    let t = match which {
        "residual" => &e.residual,
        "q" => &e.q,
        "k" => &e.k,
        _ => &e.v,
    };
    t.clone().ok_or_else(|| Error::Injection { layer, step, msg: format!("bank lacks {which}") })
}

fn bank_entry(bank: &FeatureBank, t: usize, layer: usize) -> Result<&BankEntry> {
    if !bank.steps.contains(&t) {
        return Err(Error::MissingStep { step: t });
    }
    bank.entry(t, layer)
        .ok_or_else(|| Error::Injection { layer, step: t, msg: "layer not captured".into() })
}

/// Residual replacement on `l'` and query/key replacement on `l` (or the
/// configured ablation variant).
pub fn content_directive(bank: &FeatureBank, t: usize, plan: &InjectionPlan) -> Result<InjectionDirective> {
    if bank.branch != Branch::Content {
        return Err(Error::Config(format!("content directive needs a content bank, got {}", bank.branch)));
    }
    if !bank.steps.contains(&t) {
        return Err(Error::MissingStep { step: t });
    }
    let mut d = InjectionDirective::none();
    if plan.config.content_residual {
        for layer in &plan.residual {
            let e = bank_entry(bank, t, layer.index)?;
            d.set_residual(layer.index, take(e, "residual", layer.index, t)?);
        }
    }
    for layer in &plan.attn {
        let e = bank_entry(bank, t, layer.index)?;
        let ov = match plan.config.content_attention {
            ContentAttention::QueryKey => AttentionOverride::QueryKey {
                q: take(e, "q", layer.index, t)?,
                k: take(e, "k", layer.index, t)?,
            },
            ContentAttention::KeyValue => AttentionOverride::KeyValue {
                k: take(e, "k", layer.index, t)?,
                v: take(e, "v", layer.index, t)?,
            },
            ContentAttention::Off => continue,
        };
        d.set_attention(layer.index, ov);
    }
    Ok(d)
}

/// Key/value replacement on `l`; style injection never touches residuals.
pub fn style_directive(bank: &FeatureBank, t: usize, plan: &InjectionPlan) -> Result<InjectionDirective> {
    style_directive_with(bank, t, plan, AttentionKind::KeyValue)
}

/// Like [`style_directive`] but with an explicit operand kind; only
/// key/value is a valid style injection.
pub fn style_directive_with(bank: &FeatureBank, t: usize, plan: &InjectionPlan, kind: AttentionKind) -> Result<InjectionDirective> {
    if kind != AttentionKind::KeyValue {
        return Err(Error::Config("style injection replaces key and value only".into()));
    }
    if bank.branch != Branch::Style {
        return Err(Error::Config(format!("style directive needs a style bank, got {}", bank.branch)));
    }
    if !bank.steps.contains(&t) {
        return Err(Error::MissingStep { step: t });
    }
    let mut d = InjectionDirective::none();
    for layer in &plan.attn {
        let e = bank_entry(bank, t, layer.index)?;
        d.set_attention(
            layer.index,
            AttentionOverride::KeyValue { k: take(e, "k", layer.index, t)?, v: take(e, "v", layer.index, t)? },
        );
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddim::invert_trajectory;
    use crate::denoiser::{CountingBackend, ToyUNet, ToyUNetConfig};
    use crate::latent::Latent;
    use crate::schedule::ScheduleConfig;
    use ndarray::Array3;

    fn net() -> CountingBackend<ToyUNet> {
        CountingBackend::new(
            ToyUNet::new(ToyUNetConfig { channels: 8, attn_dim: 4, cond_dim: 6, time_dim: 8, patch: 1, ..Default::default() }).unwrap(),
        )
    }

    fn schedule(steps: usize) -> NoiseSchedule {
        ScheduleConfig { sample_steps: steps, ..Default::default() }.build().unwrap()
    }

    fn trajectory(b: &dyn DenoiserBackend, branch: Branch, s: &NoiseSchedule) -> LatentTrajectory {
        let z0 = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| ((c + y * 3 + x * 5) % 7) as f32 / 3.5 - 1.0);
        invert_trajectory(&Latent::new(z0, 0, branch).unwrap(), 1, s.sample_steps(), b, &Array2::zeros((2, 6)), s).unwrap()
    }

    #[test]
    fn deciding_point_cases() {
        assert_eq!(deciding_point(0.2, 50).unwrap(), 10);
        assert_eq!(deciding_point(0.0, 50).unwrap(), 0);
        assert_eq!(deciding_point(1.0, 50).unwrap(), 50);
        assert_eq!(deciding_point(0.29, 100).unwrap(), 29);
        assert_eq!(deciding_point(0.5, 7).unwrap(), 3);
        assert!(deciding_point(1.2, 50).is_err());
        assert!(deciding_point(-0.1, 50).is_err());
    }

    #[test]
    fn select_injection_boundaries() {
        use InjectionMode::*;
        assert_eq!(select_injection(11, 10, InjectionOrder::ContentFirst), Content);
        assert_eq!(select_injection(10, 10, InjectionOrder::ContentFirst), Style);
        assert_eq!(select_injection(11, 10, InjectionOrder::StyleFirst), Style);
        assert_eq!(select_injection(10, 10, InjectionOrder::StyleFirst), Content);
    }

    #[test]
    fn steps_partition_for_any_alpha() {
        for order in [InjectionOrder::ContentFirst, InjectionOrder::StyleFirst] {
            for k in 0..=20 {
                let t_a = deciding_point(k as f64 / 20.0, 50).unwrap();
                let c: BTreeSet<_> = steps_for(InjectionMode::Content, t_a, 50, order).collect();
                let s: BTreeSet<_> = steps_for(InjectionMode::Style, t_a, 50, order).collect();
                assert!(c.is_disjoint(&s));
                assert_eq!(c.union(&s).count(), 50);
                for t in 1..=50 {
                    let m = select_injection(t, t_a, order);
                    assert_eq!(m == InjectionMode::Content, c.contains(&t));
                }
                if order == InjectionOrder::ContentFirst {
                    assert_eq!(s.len(), t_a);
                }
            }
        }
    }

    #[test]
    fn plan_rejects_encoder_or_missing_layers() {
        let b = net();
        let ok = InjectionPlan::new(&InjectionConfig::default(), &b).unwrap();
        assert_eq!(ok.attn.iter().map(|l| l.number).collect::<Vec<_>>(), (4..=11).collect::<Vec<_>>());
        assert_eq!(ok.residual.iter().map(|l| l.number).collect::<Vec<_>>(), (3..=8).collect::<Vec<_>>());
        assert!(ok.attn.iter().all(|l| l.side == Side::Decoder));
        let bad = InjectionConfig { attn_layers: [2].into(), ..Default::default() };
        assert!(InjectionPlan::new(&bad, &b).is_err());
        let bad = InjectionConfig { residual_layers: [12].into(), ..Default::default() };
        assert!(InjectionPlan::new(&bad, &b).is_err());
        let bad = InjectionConfig { alpha: 1.5, ..Default::default() };
        assert!(InjectionPlan::new(&bad, &b).is_err());
    }

    #[test]
    fn banks_cover_requested_steps_with_one_call_each() {
        let b = net();
        let s = schedule(50);
        let plan = InjectionPlan::new(&InjectionConfig::default(), &b).unwrap();
        let null = Array2::zeros((2, 6));
        let ct = trajectory(&b, Branch::Content, &s);
        let st = trajectory(&b, Branch::Style, &s);
        b.reset();
        let t_a = plan.deciding_point();
        let content = capture_bank(Branch::Content, &ct, &b, t_a + 1..=50, &plan, &null, &s).unwrap();
        let style = capture_bank(Branch::Style, &st, &b, 1..=t_a, &plan, &null, &s).unwrap();
        assert_eq!(content.steps().iter().copied().collect::<Vec<_>>(), (11..=50).collect::<Vec<_>>());
        assert_eq!(style.steps().iter().copied().collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
        assert_eq!(b.calls(), 50);

        b.reset();
        #[allow(clippy::reversed_empty_ranges)]
        let empty = capture_bank(Branch::Style, &st, &b, 1..=0, &plan, &null, &s).unwrap();
        assert!(empty.is_empty());
        assert_eq!(b.calls(), 0);

        assert!(capture_bank(Branch::Style, &ct, &b, 1..=1, &plan, &null, &s).is_err());
        let short = ct.slice(20, 50);
        assert!(matches!(capture_bank(Branch::Content, &short, &b, 19..=19, &plan, &null, &s), Err(Error::MissingStep { step: 19 })));
    }

    #[test]
    fn directive_structure() {
        let b = net();
        let s = schedule(10);
        let plan = InjectionPlan::new(&InjectionConfig { sample_steps: 10, ..Default::default() }, &b).unwrap();
        let null = Array2::zeros((2, 6));
        let content = capture_bank(Branch::Content, &trajectory(&b, Branch::Content, &s), &b, 3..=10, &plan, &null, &s).unwrap();
        let style = capture_bank(Branch::Style, &trajectory(&b, Branch::Style, &s), &b, 1..=2, &plan, &null, &s).unwrap();

        let d = content_directive(&content, 5, &plan).unwrap();
        let res: Vec<usize> = d.residual_layers();
        assert_eq!(res, plan.residual.iter().map(|l| l.index).collect::<Vec<_>>());
        assert!(d.attention_layers().iter().all(|(_, k)| *k == AttentionKind::QueryKey));
        assert_eq!(d.attention_layers().len(), 8);

        let d = style_directive(&style, 2, &plan).unwrap();
        assert!(d.residual_layers().is_empty());
        assert!(d.attention_layers().iter().all(|(_, k)| *k == AttentionKind::KeyValue));
        // shape walk: every override matches the layer's feature shape
        for layer in &plan.attn {
            let (h, w) = layer.resolution((8, 8));
            match &d.get(layer.index).unwrap().attention {
                Some(AttentionOverride::KeyValue { k, v }) => {
                    assert_eq!(k.dim(), (h * w, 4));
                    assert_eq!(v.dim(), (h * w, 4));
                }
                other => panic!("{other:?}"),
            }
        }

        assert!(style_directive_with(&style, 2, &plan, AttentionKind::QueryKey).is_err());
        assert!(matches!(content_directive(&content, 2, &plan), Err(Error::MissingStep { step: 2 })));
        assert!(matches!(style_directive(&style, 3, &plan), Err(Error::MissingStep { step: 3 })));
        assert!(content_directive(&style, 2, &plan).is_err());
        assert!(style_directive(&content, 5, &plan).is_err());

        let empty = InjectionPlan::new(
            &InjectionConfig { attn_layers: BTreeSet::new(), residual_layers: BTreeSet::new(), sample_steps: 10, ..Default::default() },
            &b,
        )
        .unwrap();
        assert!(content_directive(&content, 5, &empty).unwrap().is_empty());
        assert!(style_directive(&style, 1, &empty).unwrap().is_empty());
    }

    #[test]
    fn content_directive_on_its_own_branch_reproduces_it() {
        let b = net();
        let s = schedule(10);
        let plan = InjectionPlan::new(&InjectionConfig { sample_steps: 10, ..Default::default() }, &b).unwrap();
        let null = Array2::zeros((2, 6));
        let ct = trajectory(&b, Branch::Content, &s);
        let bank = capture_bank(Branch::Content, &ct, &b, 7..=7, &plan, &null, &s).unwrap();
        let d = content_directive(&bank, 7, &plan).unwrap();
        let z = ct.get(7).unwrap().data();
        let ts = s.train_timestep(7).unwrap();
        let plain = b.predict_noise(z, ts, &null, &InjectionDirective::none(), false).unwrap();
        let injected = b.predict_noise(z, ts, &null, &d, false).unwrap();
        let diff = (&plain.eps - &injected.eps).mapv(f32::abs).fold(0.0f32, |m, v| m.max(*v));
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn bank_dump_round_trip_and_merge() {
        let b = net();
        let s = schedule(6);
        let plan = InjectionPlan::new(&InjectionConfig { sample_steps: 6, ..Default::default() }, &b).unwrap();
        let null = Array2::zeros((2, 6));
        let ct = trajectory(&b, Branch::Content, &s);
        let mut bank = capture_bank(Branch::Content, &ct, &b, 5..=6, &plan, &null, &s).unwrap();
        bank.merge(capture_bank(Branch::Content, &ct, &b, 3..=4, &plan, &null, &s).unwrap()).unwrap();
        assert_eq!(bank.steps().len(), 4);
        assert!(bank.merge(capture_bank(Branch::Content, &ct, &b, 3..=3, &plan, &null, &s).unwrap()).is_err());

        let dir = tempfile::tempdir().unwrap();
        bank.save(dir.path()).unwrap();
        assert_eq!(FeatureBank::load(dir.path()).unwrap(), bank);
    }

    #[test]
    fn config_json_uses_decoder_numbers() {
        let cfg = InjectionConfig::default();
        let js = serde_json::to_value(&cfg).unwrap();
        assert_eq!(js["attn_layers"], serde_json::json!([4, 5, 6, 7, 8, 9, 10, 11]));
        assert_eq!(js["injection_order"], "content_first");
        let back: InjectionConfig = serde_json::from_value(serde_json::json!({"alpha": 0.5})).unwrap();
        assert_eq!(back.alpha, 0.5);
        assert_eq!(back.cfg_scale, 7.5);
        assert!(serde_json::from_value::<InjectionConfig>(serde_json::json!({"alpah": 0.5})).is_err());
    }
}
