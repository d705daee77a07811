use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use ndarray::{Array2, Array3};
use tower::ServiceExt;

use styleinject_core::codec::{ImageAsset, ImageRole};
use styleinject_core::denoiser::{
    BackendConfig, DenoiserBackend, InjectionDirective, LayerDescriptor, NoisePrediction, ToyUNet, ToyUNetConfig,
};
use styleinject_core::pipeline::{Engine, EngineConfig};
use styleinject_service::{router, AppState, JobRecord, JobState, Meta, ServiceConfig};

/// Blocks feature-capturing passes until opened, so tests can observe
/// queued/running jobs deterministically.
struct Gated {
    inner: ToyUNet,
    open: Mutex<bool>,
    cv: Condvar,
}

impl Gated {
    fn release(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }
}

impl DenoiserBackend for Gated {
    fn name(&self) -> &str {
        "gated-toy"
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
        t: usize,
        cond: &Array2<f32>,
        d: &InjectionDirective,
        capture: bool,
    ) -> styleinject_core::Result<NoisePrediction> {
        if capture {
            let g = self.open.lock().unwrap();
            drop(self.cv.wait_while(g, |open| !*open).unwrap());
        }
        self.inner.predict_noise(z, t, cond, d, capture)
    }
}

fn toy() -> ToyUNetConfig {
    ToyUNetConfig { channels: 8, attn_dim: 4, time_dim: 8, patch: 1, ..Default::default() }
}

fn app(parallelism: usize, open: bool) -> (axum::Router, Arc<Gated>, tempfile::TempDir) {
    let gated = Arc::new(Gated { inner: ToyUNet::new(toy()).unwrap(), open: Mutex::new(open), cv: Condvar::new() });
    let engine = Engine::with_backend(EngineConfig { backend: BackendConfig::Toy(toy()), ..Default::default() }, gated.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::new(engine, ServiceConfig { output_dir: dir.path().to_path_buf(), parallelism }).unwrap();
    (router(state), gated, dir)
}

fn png(k: usize, size: usize) -> Vec<u8> {
    let px = Array3::from_shape_fn((3, size, size), |(c, y, x)| ((c + y * k + x * (k + 1)) % 9) as f32 / 8.0);
    ImageAsset::new(px, ImageRole::Content).unwrap().to_png_bytes().unwrap()
}

const BOUNDARY: &str = "XBOUNDARYX";

fn multipart(parts: &[(&str, &[u8])]) -> Request<Body> {
    let mut body = Vec::new();
    for (name, data) in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n\r\n").as_bytes());
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/jobs")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &axum::Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn submit(app: &axum::Router, content: &[u8], style: &[u8], params: &str) -> JobRecord {
    let (status, body) = send(app, multipart(&[("content", content), ("style", style), ("params", params.as_bytes())])).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

async fn wait_done(app: &axum::Router, id: &str) -> Vec<JobRecord> {
    let mut seen = vec![];
    for _ in 0..2000 {
        let (status, body) = get(app, &format!("/jobs/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        let rec: JobRecord = serde_json::from_slice(&body).unwrap();
        let state = rec.state;
        seen.push(rec);
        if matches!(state, JobState::Done | JobState::Failed) {
            return seen;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn meta_echoes_defaults() {
    let (app, _, _dir) = app(1, true);
    let (status, body) = get(&app, "/meta").await;
    assert_eq!(status, StatusCode::OK);
    let meta: Meta = serde_json::from_slice(&body).unwrap();
    assert_eq!(meta.defaults.alpha, 0.2);
    assert_eq!(meta.defaults.attn_layers, (4..=11).collect::<Vec<_>>());
    assert_eq!(meta.defaults.residual_layers, (3..=8).collect::<Vec<_>>());
    assert_eq!(meta.defaults.sample_steps, 50);
    assert_eq!(meta.defaults.cfg_scale, 7.5);
    assert_eq!(meta.layers.len(), 18);
    assert_eq!(get(&app, "/health").await, (StatusCode::OK, b"ok".to_vec()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn lifecycle_with_defaults() {
    let (app, gate, _dir) = app(1, false);
    let rec = submit(&app, &png(1, 16), &png(2, 16), "{}").await;
    assert_eq!(rec.state, JobState::Queued);
    assert_eq!(rec.progress.total, 50);

    let (status, _) = get(&app, &format!("/jobs/{}/result", rec.id)).await;
    assert_eq!(status, StatusCode::CONFLICT);

    gate.release();
    let history = wait_done(&app, &rec.id).await;
    let last = history.last().unwrap();
    assert_eq!(last.state, JobState::Done, "{:?}", last.error);
    assert_eq!((last.progress.done, last.progress.total), (50, 50));
    assert!(history.windows(2).all(|w| w[1].progress.done >= w[0].progress.done));

    let (status, a) = get(&app, &format!("/jobs/{}/result", rec.id)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&a[1..4], b"PNG");
    let (_, b) = get(&app, &format!("/jobs/{}/result", rec.id)).await;
    assert_eq!(a, b);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_jobs_are_isolated() {
    let (app, _, dir) = app(2, true);
    let params = r#"{"sample_steps": 8, "alpha": 0.5}"#;
    let a = submit(&app, &png(1, 16), &png(2, 16), params).await;
    let b = submit(&app, &png(3, 16), &png(2, 16), params).await;
    let (ra, rb) = tokio::join!(wait_done(&app, &a.id), wait_done(&app, &b.id));
    let (ra, rb) = (ra.last().unwrap().clone(), rb.last().unwrap().clone());
    assert_eq!((ra.state, rb.state), (JobState::Done, JobState::Done));
    assert_ne!(ra.result, rb.result);
    for r in [&ra, &rb] {
        let path = dir.path().join(format!("{}.png", r.result.as_ref().unwrap()));
        assert!(path.exists());
        assert!(dir.path().join(format!("{}.trace.json", r.result.as_ref().unwrap())).exists());
    }

    // identical inputs land on the same content address
    let c = submit(&app, &png(1, 16), &png(2, 16), params).await;
    let rc = wait_done(&app, &c.id).await.pop().unwrap();
    assert_eq!(rc.result, ra.result);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn invalid_requests() {
    let (app, _, _dir) = app(1, true);
    assert_eq!(get(&app, "/jobs/nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/jobs/nope/result").await.0, StatusCode::NOT_FOUND);

    let cases: Vec<Vec<(&str, Vec<u8>)>> = vec![
        vec![("content", png(1, 16)), ("style", png(2, 16)), ("params", br#"{"alpha": 1.5}"#.to_vec())],
        vec![("content", png(1, 16)), ("style", png(2, 16)), ("params", br#"{"alpah": 0.5}"#.to_vec())],
        vec![("content", png(1, 16)), ("style", png(2, 16)), ("params", br#"{"attn_layers": [1]}"#.to_vec())],
        vec![("content", png(1, 16)), ("params", b"{}".to_vec())],
        vec![("content", b"not a png".to_vec()), ("style", png(2, 16))],
        vec![("content", png(1, 12)), ("style", png(2, 12))],
        vec![("content", png(1, 16)), ("style", png(2, 16)), ("extra", b"x".to_vec())],
    ];
    for (i, parts) in cases.iter().enumerate() {
        let refs: Vec<(&str, &[u8])> = parts.iter().map(|(n, d)| (*n, d.as_slice())).collect();
        let (status, body) = send(&app, multipart(&refs)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "case {i}: {}", String::from_utf8_lossy(&body));
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert!(v["error"].as_str().unwrap().len() > 3);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn style_is_resized_to_content() {
    let (app, _, _dir) = app(1, true);
    let rec = submit(&app, &png(1, 16), &png(2, 32), r#"{"sample_steps": 4}"#).await;
    let last = wait_done(&app, &rec.id).await.pop().unwrap();
    assert_eq!(last.state, JobState::Done, "{:?}", last.error);
}
