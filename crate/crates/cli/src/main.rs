//! `styleinject` — style transfer, α sweeps, ablations, inversion dumps,
//! metrics reports and the HTTP service.
//!
//! Exit codes: 0 success, 2 invalid flags or config, 3 IO, 4 pipeline error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{s, Array3};

use styleinject_core::codec::{ImageAsset, ImageRole};
use styleinject_core::denoiser::{BackendConfig, ToyUNet, ToyUNetConfig};
use styleinject_core::injection::{ContentAttention, InjectionOrder};
use styleinject_core::latent::Branch;
use styleinject_core::metrics::{evaluate_pair, write_csv, FeatureExtractor};
use styleinject_core::pipeline::{Engine, EngineConfig, JobParams, Progress, TransferJob, TransferResult};
use styleinject_core::Error;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Pipeline(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Pipeline(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "invalid arguments: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Pipeline(m) => write!(f, "pipeline error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Io { .. } | Error::Image(_) | Error::Csv(_) => CliError::Io(e.to_string()),
            Error::Json(_) => CliError::Usage(e.to_string()),
            _ if e.is_user_error() => CliError::Usage(e.to_string()),
            _ => CliError::Pipeline(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "styleinject", version, about = "Training-free diffusion style transfer")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stylize one content image with one style image.
    Transfer(TransferArgs),
    /// Run one transfer per α value and assemble a comparison grid.
    Sweep(SweepArgs),
    /// Run a degraded pipeline variant.
    Ablate(AblateArgs),
    /// Dump the DDIM inversion trajectory of one image.
    Invert(InvertArgs),
    /// Score outputs against content and style images (CSV report).
    Metrics(MetricsArgs),
    /// Serve the HTTP job API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// JSON job config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Content prompt.
    #[arg(long)]
    prompt: Option<String>,
    /// Edit prompt (text-guided editing).
    #[arg(long)]
    edit_prompt: Option<String>,
}

#[derive(Args, Default)]
struct Knobs {
    /// Fraction of final steps that receive style injection.
    #[arg(long)]
    alpha: Option<f64>,
    /// DDIM sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f32>,
    /// Decoder layers for attention injection, e.g. `4-11` or `4,6,8-11`.
    #[arg(long, value_parser = parse_layers)]
    attn_layers: Option<BTreeSet<usize>>,
    /// Decoder layers for residual injection.
    #[arg(long, value_parser = parse_layers)]
    residual_layers: Option<BTreeSet<usize>>,
}

#[derive(Args, Default)]
struct Ablations {
    /// Drop query/key replacement from content injection.
    #[arg(long, conflicts_with = "content_kv")]
    no_content_attn: bool,
    /// Drop residual replacement from content injection.
    #[arg(long)]
    no_content_residual: bool,
    /// Skip style injection in the style phase.
    #[arg(long)]
    no_style: bool,
    /// Condition the target on the content prompt only.
    #[arg(long)]
    no_blip_text: bool,
    /// Which injection comes first in reverse time.
    #[arg(long, value_enum)]
    order: Option<Order>,
    /// Replace key/value instead of query/key during content injection.
    #[arg(long)]
    content_kv: bool,
}

impl Ablations {
    fn names(&self) -> Vec<&'static str> {
        let mut v = vec![];
        if self.no_content_attn {
            v.push("no_content_attn");
        }
        if self.no_content_residual {
            v.push("no_content_residual");
        }
        if self.no_style {
            v.push("no_style");
        }
        if self.no_blip_text {
            v.push("no_blip_text");
        }
        if self.order == Some(Order::StyleFirst) {
            v.push("style_first");
        }
        if self.content_kv {
            v.push("content_kv");
        }
        v
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Order {
    #[value(name = "content_first", alias = "content-first")]
    ContentFirst,
    #[value(name = "style_first", alias = "style-first")]
    StyleFirst,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Toy,
    External,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "toy")]
    backend: BackendKind,
    /// Seed of the toy U-Net weights.
    #[arg(long, default_value_t = 0)]
    toy_seed: u64,
    /// Load toy U-Net weights saved earlier instead of seeding them.
    #[arg(long)]
    toy_weights: Option<PathBuf>,
    /// Name of the external model (with `--backend external`).
    #[arg(long, default_value = "stable-diffusion")]
    model: String,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    knobs: Knobs,
    #[command(flatten)]
    ablations: Ablations,
    #[command(flatten)]
    backend: BackendArgs,
    /// Write the content and style feature banks under `<out>/banks`.
    #[arg(long)]
    dump_banks: bool,
    /// Write the target latents under `<out>/latents`.
    #[arg(long)]
    dump_latents: bool,
    /// Print per-step progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    knobs: Knobs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Comma-separated α values.
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    knobs: Knobs,
    #[command(flatten)]
    ablations: Ablations,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Content,
    Style,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, value_enum, default_value = "content")]
    branch: BranchArg,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Last step to invert to (defaults to `--steps`).
    #[arg(long)]
    t_hi: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "inversion")]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorArg {
    Toy,
    Pointwise,
}

#[derive(Args)]
struct MetricsArgs {
    /// Generated images; one CSV row each.
    #[arg(long, required = true, num_args = 1..)]
    output: Vec<PathBuf>,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    csv: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    extractor: ExtractorArg,
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
    /// Runtime to record for each row, in milliseconds.
    #[arg(long, default_value_t = 0.0)]
    runtime_ms: f64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Jobs executed concurrently.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[command(flatten)]
    backend: BackendArgs,
}

fn parse_layers(s: &str) -> Result<BTreeSet<usize>, String> {
    let mut out = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("bad layer `{x}`"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty layer range `{part}`"));
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(num(part)?);
            }
        }
    }
    Ok(out)
}

/// Defaults, then the JSON config, then flags.
fn resolve_params(inputs: &Inputs, knobs: &Knobs, ablations: &Ablations) -> CliResult<JobParams> {
    let mut p = match &inputs.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            serde_json::from_str::<JobParams>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => JobParams::default(),
    };
    let c = &mut p.config;
    if let Some(v) = knobs.alpha {
        c.alpha = v;
    }
    if let Some(v) = knobs.steps {
        c.sample_steps = v;
    }
    if let Some(v) = knobs.cfg_scale {
        c.cfg_scale = v;
    }
    if let Some(v) = &knobs.attn_layers {
        c.attn_layers = v.clone();
    }
    if let Some(v) = &knobs.residual_layers {
        c.residual_layers = v.clone();
    }
    if ablations.no_content_attn {
        c.content_attention = ContentAttention::Off;
    }
    if ablations.content_kv {
        c.content_attention = ContentAttention::KeyValue;
    }
    if ablations.no_content_residual {
        c.content_residual = false;
    }
    if ablations.no_style {
        c.style_injection = false;
    }
    if ablations.no_blip_text {
        c.style_text = false;
    }
    match ablations.order {
        Some(Order::StyleFirst) => c.injection_order = InjectionOrder::StyleFirst,
        Some(Order::ContentFirst) => c.injection_order = InjectionOrder::ContentFirst,
        None => {}
    }
    if let Some(v) = inputs.seed {
        p.seed = v;
    }
    if let Some(v) = &inputs.prompt {
        p.content_prompt = v.clone();
    }
    if let Some(v) = &inputs.edit_prompt {
        p.edit_prompt = Some(v.clone());
    }
    p.validate()?;
    Ok(p)
}

fn build_engine(args: &BackendArgs) -> CliResult<Engine> {
    match (args.backend, &args.toy_weights) {
        (BackendKind::External, _) => {
            let cfg = EngineConfig { backend: BackendConfig::External { name: args.model.clone() }, ..Default::default() };
            Ok(Engine::new(cfg)?)
        }
        (BackendKind::Toy, Some(dir)) => {
            let net = ToyUNet::load(dir)?;
            let cfg = EngineConfig { backend: BackendConfig::Toy(net.config().clone()), ..Default::default() };
            Ok(Engine::with_backend(cfg, Arc::new(net))?)
        }
        (BackendKind::Toy, None) => {
            let toy = ToyUNetConfig { seed: args.toy_seed, ..Default::default() };
            Ok(Engine::new(EngineConfig { backend: BackendConfig::Toy(toy), ..Default::default() })?)
        }
    }
}

fn load_job(inputs: &Inputs, params: &JobParams) -> CliResult<TransferJob> {
    let content = ImageAsset::load_png(&inputs.content, ImageRole::Content)?;
    let mut style = ImageAsset::load_png(&inputs.style, ImageRole::Style)?;
    if (style.height(), style.width()) != (content.height(), content.width()) {
        eprintln!(
            "note: resizing style image from {}x{} to {}x{}",
            style.height(),
            style.width(),
            content.height(),
            content.width()
        );
        style = style.resized(content.height(), content.width())?;
    }
    Ok(TransferJob::with_params(content, style, params))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, v: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(v).expect("json values serialize");
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_result(dir: &Path, stem: &str, r: &TransferResult, params: &JobParams, runtime_ms: f64) -> CliResult<PathBuf> {
    let png = dir.join(format!("{stem}.png"));
    r.output.save_png(&png)?;
    let mut trace = r.trace_json();
    trace["runtime_ms"] = runtime_ms.into();
    trace["params"] = serde_json::to_value(params).expect("params serialize");
    write_json(&dir.join(format!("{stem}.trace.json")), &trace)?;
    Ok(png)
}

fn summary(r: &TransferResult) -> String {
    use styleinject_core::pipeline::StepMode;
    format!(
        "t_alpha={} content_steps={} style_steps={} plain_steps={} evaluations(inversion={}, branch={}, target={})",
        r.deciding_point,
        r.count(StepMode::Content),
        r.count(StepMode::Style),
        r.count(StepMode::Plain),
        r.stats.inversion_evaluations,
        r.stats.branch_evaluations,
        r.stats.target_evaluations
    )
}

fn cmd_transfer(a: TransferArgs) -> CliResult {
    let params = resolve_params(&a.inputs, &a.knobs, &a.ablations)?;
    let mut job = load_job(&a.inputs, &params)?;
    job.keep_banks = a.dump_banks;
    job.keep_latents = a.dump_latents;
    let engine = build_engine(&a.backend)?;
    create_dir(&a.inputs.out)?;
    let started = Instant::now();
    let verbose = a.verbose;
    let r = engine.run_with_progress(&job, &mut |p: Progress| {
        if verbose {
            eprintln!("step {}/{}", p.done, p.total);
        }
    })?;
    let ms = started.elapsed().as_secs_f64() * 1e3;
    let png = write_result(&a.inputs.out, "output", &r, &params, ms)?;
    write_json(&a.inputs.out.join("params.json"), &serde_json::to_value(&params).expect("params serialize"))?;
    if let (Some(c), Some(s)) = (&r.content_bank, &r.style_bank) {
        c.save(&a.inputs.out.join("banks").join("content"))?;
        s.save(&a.inputs.out.join("banks").join("style"))?;
    }
    if let Some(l) = &r.latents {
        l.save(&a.inputs.out.join("latents"), &engine.schedule_for(params.config.sample_steps)?)?;
    }
    println!("wrote {} in {:.0} ms; {}", png.display(), ms, summary(&r));
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    if a.knobs.alpha.is_some() {
        return Err(CliError::Usage("use --alphas with sweep, not --alpha".into()));
    }
    let params = resolve_params(&a.inputs, &a.knobs, &Ablations::default())?;
    for v in &a.alphas {
        if !(0.0..=1.0).contains(v) {
            return Err(CliError::Usage(format!("alpha {v} outside [0, 1]")));
        }
    }
    let job = load_job(&a.inputs, &params)?;
    let engine = build_engine(&a.backend)?;
    create_dir(&a.inputs.out)?;
    let started = Instant::now();
    let sweep = engine.sweep_alpha(&job, &a.alphas)?;
    let ms = started.elapsed().as_secs_f64() * 1e3;
    let mut tiles = vec![];
    for (alpha, r) in a.alphas.iter().zip(&sweep.results) {
        let mut p = params.clone();
        p.config.alpha = *alpha;
        let png = write_result(&a.inputs.out, &format!("alpha_{alpha:.2}"), r, &p, ms / a.alphas.len() as f64)?;
        println!("alpha={alpha:.2} -> {}; {}", png.display(), summary(r));
        tiles.push(&r.output);
    }
    let grid = a.inputs.out.join("sweep.png");
    montage(&tiles)?.save_png(&grid)?;
    println!(
        "cache: content_inversions={} style_inversions={} inversion_evaluations={}",
        sweep.content_inversions, sweep.style_inversions, sweep.inversion_evaluations
    );
    println!("wrote {} ({} tiles) in {:.0} ms", grid.display(), tiles.len(), ms);
    Ok(())
}

/// Lays images out left to right with a white 2-pixel gutter.
fn montage(tiles: &[&ImageAsset]) -> CliResult<ImageAsset> {
    const GUTTER: usize = 2;
    let h = tiles.iter().map(|t| t.height()).max().unwrap_or(1);
    let w: usize = tiles.iter().map(|t| t.width()).sum::<usize>() + GUTTER * tiles.len().saturating_sub(1);
    let mut canvas = Array3::<f32>::ones((3, h, w.max(1)));
    let mut x = 0;
    for t in tiles {
        canvas.slice_mut(s![.., ..t.height(), x..x + t.width()]).assign(t.pixels());
        x += t.width() + GUTTER;
    }
    Ok(ImageAsset::new(canvas, ImageRole::Output)?)
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let names = a.ablations.names();
    if names.is_empty() {
        return Err(CliError::Usage(
            "choose at least one of --no-content-attn, --no-content-residual, --no-style, --no-blip-text, --order style_first, --content-kv".into(),
        ));
    }
    let params = resolve_params(&a.inputs, &a.knobs, &a.ablations)?;
    let job = load_job(&a.inputs, &params)?;
    let engine = build_engine(&a.backend)?;
    create_dir(&a.inputs.out)?;
    let started = Instant::now();
    let r = engine.run_style_transfer(&job)?;
    let ms = started.elapsed().as_secs_f64() * 1e3;
    let stem = format!("ablate_{}", names.join("+"));
    let png = write_result(&a.inputs.out, &stem, &r, &params, ms)?;
    println!("ablation {}: wrote {}; {}", names.join(","), png.display(), summary(&r));
    Ok(())
}

fn cmd_invert(a: InvertArgs) -> CliResult {
    let t_hi = a.t_hi.unwrap_or(a.steps);
    if a.steps == 0 || t_hi == 0 || t_hi > a.steps {
        return Err(CliError::Usage(format!("need 1 <= t_hi <= steps, got t_hi={t_hi}, steps={}", a.steps)));
    }
    let (role, branch) = match a.branch {
        BranchArg::Content => (ImageRole::Content, Branch::Content),
        BranchArg::Style => (ImageRole::Style, Branch::Style),
    };
    let img = ImageAsset::load_png(&a.image, role)?;
    let engine = build_engine(&a.backend)?;
    let traj = engine.invert_image(&img, branch, a.steps, t_hi, a.seed)?;
    traj.save(&a.out, &engine.schedule_for(a.steps)?)?;
    let last = traj.require(t_hi)?.data();
    let std = (last.mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt();
    println!("wrote {} latents ({branch} branch, steps 1..={t_hi}) to {}; rms(z_{t_hi})={std:.4}", traj.len(), a.out.display());
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> CliResult {
    let fx = match a.extractor {
        ExtractorArg::Toy => FeatureExtractor::toy(a.extractor_seed),
        ExtractorArg::Pointwise => FeatureExtractor::pointwise(a.extractor_seed),
    };
    let content = ImageAsset::load_png(&a.content, ImageRole::Content)?;
    let style = ImageAsset::load_png(&a.style, ImageRole::Style)?;
    let mut rows = vec![];
    for path in &a.output {
        let out = ImageAsset::load_png(path, ImageRole::Output)?;
        let style = if (style.height(), style.width()) != (out.height(), out.width()) {
            style.resized(out.height(), out.width())?
        } else {
            style.clone()
        };
        let row = evaluate_pair(&path.display().to_string(), &out, &content, &style, &fx, a.runtime_ms)?;
        println!("{}: content_loss={:.6} style_loss={:.6} mse={:.6}", row.name, row.content_loss, row.style_loss, row.mse);
        rows.push(row);
    }
    write_csv(&a.csv, &rows)?;
    println!("wrote {}", a.csv.display());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CliResult {
    use styleinject_service::{AppState, ServiceConfig};
    let _ = tracing_subscriber::fmt().with_env_filter(
        tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
    ).with_writer(std::io::stderr).try_init();
    if a.parallelism == 0 {
        return Err(CliError::Usage("--parallelism must be at least 1".into()));
    }
    let engine = build_engine(&a.backend)?;
    let state = AppState::new(engine, ServiceConfig { output_dir: a.out.clone(), parallelism: a.parallelism })
        .map_err(|e| io_err(&a.out, e))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr).await.map_err(|e| CliError::Io(format!("bind {}: {e}", a.addr)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
        println!("listening on http://{addr}");
        use std::io::Write;
        let _ = std::io::stdout().flush();
        styleinject_service::serve(listener, state).await.map_err(|e| CliError::Io(e.to_string()))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Transfer(a) => cmd_transfer(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_lists() {
        assert_eq!(parse_layers("4-11").unwrap(), (4..=11).collect());
        assert_eq!(parse_layers("3, 5,8-9").unwrap(), [3, 5, 8, 9].into_iter().collect());
        assert!(parse_layers("9-3").is_err());
        assert!(parse_layers("x").is_err());
    }

    #[test]
    fn ablation_names() {
        let a = Ablations { no_style: true, order: Some(Order::StyleFirst), ..Default::default() };
        assert_eq!(a.names(), vec!["no_style", "style_first"]);
    }
}
