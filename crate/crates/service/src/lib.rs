//! HTTP job service: submit transfer jobs, poll progress, fetch results.
//!
//! Jobs run on an in-process queue bounded by a semaphore; results are
//! written to a content-addressed directory (`<sha256 of png>.png`) and are
//! never rewritten once a job is done.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use styleinject_core::codec::{ImageAsset, ImageRole};
use styleinject_core::denoiser::LayerDescriptor;
use styleinject_core::injection::InjectionConfig;
use styleinject_core::pipeline::{Engine, JobParams, Progress, TransferJob};

const MAX_UPLOAD: usize = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("no job with id {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    fn may_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done) | (JobState::Running, JobState::Failed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobProgress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub state: JobState,
    pub progress: JobProgress,
    pub params: JobParams,
    /// Content hash of the result PNG, set when done.
    pub result: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub output_dir: PathBuf,
    /// Jobs executing at once.
    pub parallelism: usize,
}

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    jobs: Arc<RwLock<HashMap<String, JobRecord>>>,
    permits: Arc<Semaphore>,
    output_dir: Arc<PathBuf>,
}

impl AppState {
    pub fn new(engine: Engine, cfg: ServiceConfig) -> std::io::Result<Self> {
        std::fs::create_dir_all(&cfg.output_dir)?;
        Ok(Self {
            engine: Arc::new(engine),
            jobs: Arc::default(),
            permits: Arc::new(Semaphore::new(cfg.parallelism.max(1))),
            output_dir: Arc::new(cfg.output_dir),
        })
    }

    /// Linearizable snapshot of one job.
    pub fn job(&self, id: &str) -> Option<JobRecord> {
        self.jobs.read().expect("job table poisoned").get(id).cloned()
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) {
        if let Some(rec) = self.jobs.write().expect("job table poisoned").get_mut(id) {
            f(rec);
        }
    }

    fn transition(&self, id: &str, next: JobState, f: impl FnOnce(&mut JobRecord)) {
        self.update(id, |rec| {
            debug_assert!(rec.state.may_become(next), "{:?} -> {next:?}", rec.state);
            if rec.state.may_become(next) {
                rec.state = next;
                f(rec);
            }
        });
    }

    pub fn result_path(&self, hash: &str) -> PathBuf {
        self.output_dir.join(format!("{hash}.png"))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/meta", get(meta))
        .route("/jobs", post(create_job))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/result", get(get_result))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

/// Serves until the listener fails or ctrl-c is received.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Meta {
    pub backend: String,
    pub layers: Vec<LayerDescriptor>,
    pub defaults: MetaDefaults,
    pub alpha_range: [f64; 2],
    pub max_sample_steps: usize,
    pub job_schema_version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetaDefaults {
    pub alpha: f64,
    pub attn_layers: Vec<usize>,
    pub residual_layers: Vec<usize>,
    pub sample_steps: usize,
    pub cfg_scale: f32,
}

async fn meta(State(st): State<AppState>) -> Json<Meta> {
    let d = InjectionConfig::default();
    let backend = st.engine.backend();
    Json(Meta {
        backend: backend.name().to_string(),
        layers: backend.list_layers(),
        defaults: MetaDefaults {
            alpha: d.alpha,
            attn_layers: d.attn_layers.into_iter().collect(),
            residual_layers: d.residual_layers.into_iter().collect(),
            sample_steps: d.sample_steps,
            cfg_scale: d.cfg_scale,
        },
        alpha_range: [0.0, 1.0],
        max_sample_steps: st.engine.config().schedule.train_steps,
        job_schema_version: styleinject_core::pipeline::JOB_SCHEMA_VERSION,
    })
}

async fn get_job(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<JobRecord>, ApiError> {
    st.job(&id).map(Json).ok_or(ApiError::NotFound(id))
}

async fn get_result(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let rec = st.job(&id).ok_or_else(|| ApiError::NotFound(id.clone()))?;
    let hash = match (rec.state, rec.result) {
        (JobState::Done, Some(h)) => h,
        (JobState::Failed, _) => {
            return Err(ApiError::Conflict(format!("job {id} failed: {}", rec.error.unwrap_or_default())))
        }
        (state, _) => return Err(ApiError::Conflict(format!("job {id} is {state:?}, result not ready"))),
    };
    let bytes = tokio::fs::read(st.result_path(&hash)).await.map_err(|e| ApiError::Internal(format!("result {hash}: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn create_job(State(st): State<AppState>, mut form: Multipart) -> Result<(StatusCode, Json<JobRecord>), ApiError> {
    let (mut content, mut style, mut params) = (None, None, None);
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::Invalid(format!("bad multipart body: {e}")))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::Invalid(format!("field {name}: {e}")))?;
        match name.as_str() {
            "content" => content = Some(decode(&bytes, ImageRole::Content, "content")?),
            "style" => style = Some(decode(&bytes, ImageRole::Style, "style")?),
            "params" => {
                let p: JobParams = serde_json::from_slice(&bytes).map_err(|e| ApiError::Invalid(format!("params: {e}")))?;
                params = Some(p);
            }
            other => return Err(ApiError::Invalid(format!("unexpected field `{other}`"))),
        }
    }
    let content = content.ok_or_else(|| ApiError::Invalid("missing `content` image".into()))?;
    let style = style.ok_or_else(|| ApiError::Invalid("missing `style` image".into()))?;
    let params = params.unwrap_or_default();
    params.validate().map_err(|e| ApiError::Invalid(e.to_string()))?;
    let style = if (style.height(), style.width()) != (content.height(), content.width()) {
        style.resized(content.height(), content.width()).map_err(|e| ApiError::Invalid(e.to_string()))?
    } else {
        style
    };
    let job = TransferJob::with_params(content, style, &params);

    let engine = st.engine.clone();
    let checked = tokio::task::spawn_blocking(move || engine.validate_job(&job).map(|_| job))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let job = checked.map_err(|e| if e.is_user_error() { ApiError::Invalid(e.to_string()) } else { ApiError::Internal(e.to_string()) })?;

    let id = uuid::Uuid::new_v4().simple().to_string();
    let rec = JobRecord {
        id: id.clone(),
        state: JobState::Queued,
        progress: JobProgress { done: 0, total: params.config.sample_steps },
        params,
        result: None,
        error: None,
    };
    st.jobs.write().expect("job table poisoned").insert(id.clone(), rec.clone());
    tokio::spawn(run_job(st, id, job));
    Ok((StatusCode::ACCEPTED, Json(rec)))
}

fn decode(bytes: &[u8], role: ImageRole, what: &str) -> Result<ImageAsset, ApiError> {
    ImageAsset::from_image_bytes(bytes, role).map_err(|e| ApiError::Invalid(format!("{what} image: {e}")))
}

async fn run_job(st: AppState, id: String, job: TransferJob) {
    let Ok(_permit) = st.permits.clone().acquire_owned().await else {
        return;
    };
    st.transition(&id, JobState::Running, |_| {});
    let worker = st.clone();
    let wid = id.clone();
    let outcome = tokio::task::spawn_blocking(move || -> Result<String, String> {
        let result = worker
            .engine
            .run_with_progress(&job, &mut |p: Progress| {
                worker.update(&wid, |rec| rec.progress.done = rec.progress.done.max(p.done));
            })
            .map_err(|e| e.to_string())?;
        let png = result.output.to_png_bytes().map_err(|e| e.to_string())?;
        let hash = hex::encode(Sha256::digest(&png));
        persist(&worker.output_dir, &hash, &png, &result.trace_json()).map_err(|e| format!("writing result: {e}"))?;
        Ok(hash)
    })
    .await
    .unwrap_or_else(|e| Err(format!("worker panicked: {e}")));
    match outcome {
        Ok(hash) => {
            tracing::info!(job = %id, %hash, "job done");
            st.transition(&id, JobState::Done, |rec| {
                rec.progress.done = rec.progress.total;
                rec.result = Some(hash);
            })
        }
        Err(msg) => {
            tracing::warn!(job = %id, error = %msg, "job failed");
            st.transition(&id, JobState::Failed, |rec| rec.error = Some(msg))
        }
    }
}

/// Writes `<hash>.png` (and its trace) unless an identical result already exists.
fn persist(dir: &Path, hash: &str, png: &[u8], trace: &serde_json::Value) -> std::io::Result<()> {
    let path = dir.join(format!("{hash}.png"));
    if !path.exists() {
        let tmp = dir.join(format!(".{hash}.{}.tmp", uuid::Uuid::new_v4().simple()));
        std::fs::write(&tmp, png)?;
        std::fs::rename(&tmp, &path)?;
    }
    let trace_path = dir.join(format!("{hash}.trace.json"));
    if !trace_path.exists() {
        std::fs::write(trace_path, serde_json::to_vec_pretty(trace)?)?;
    }
    Ok(())
}
