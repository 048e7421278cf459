//! HTTP service over a reconstructed run directory: region listings, matching
//! edits and one-at-a-time stylization jobs.

mod workspace;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::header::{CONTENT_TYPE, ETAG, IF_MATCH};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use locstyle::checkpoint::Checkpoint;
use locstyle::error::{Error, Result};
use locstyle::jobs::{JobKind, JobRecord};
use locstyle::pipeline::{content_targets, view_outputs, CostTable, MetricsLog, PreparedStyle, Stylization};
use locstyle::region_matching::{apply_custom_matching, parse_matching_json, Matching, MatchingFile};
use locstyle::style_losses::ColorTransform;
use locstyle::volume_renderer::{render_view, SamplingConfig};

pub use workspace::{overlay, region_cards, RegionCard, StyleState, Workspace};

/// Shared service state.
pub struct App {
    pub workspace: Workspace,
    styles: RwLock<BTreeMap<u32, StyleState>>,
    jobs: Mutex<JobTable>,
    journal: Mutex<u64>,
}

#[derive(Default)]
struct JobTable {
    records: BTreeMap<String, JobRecord>,
    active: Option<String>,
    next: u64,
}

/// Body of `GET`/`PUT /api/style/{s}/matching`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingResponse {
    pub matching: MatchingFile,
    pub cost: Option<CostTable>,
    /// Same token as the `ETag` header.
    pub version: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StylizeRequest {
    pub style_index: u32,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: String,
}

#[derive(Deserialize)]
struct StyleQuery {
    style: u32,
}

/// Error body: `{"error": "..."}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn invalid(message: impl ToString) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Version token of a matching: first 16 hex digits of the SHA-256 of its
/// JSON form, quoted as an entity tag.
pub fn matching_etag(m: &Matching) -> String {
    let digest = Sha256::digest(m.to_json().as_bytes());
    format!("\"{}\"", &hex::encode(digest)[..16])
}

fn png(bytes: Vec<u8>) -> Response {
    ([(CONTENT_TYPE, HeaderValue::from_static("image/png"))], bytes).into_response()
}

impl App {
    pub fn open(run_dir: &Path) -> Result<Arc<Self>> {
        let (workspace, styles) = Workspace::open(run_dir)?;
        Ok(Arc::new(Self {
            workspace,
            styles: RwLock::new(styles),
            jobs: Mutex::new(JobTable::default()),
            journal: Mutex::new(0),
        }))
    }

    /// Appends one line to `journal.jsonl`.
    fn journal(&self, action: &str, detail: serde_json::Value) -> Result<()> {
        let mut seq = self.journal.lock().expect("journal lock");
        *seq += 1;
        let path = self.workspace.dir.journal();
        let line = json!({ "seq": *seq, "action": action, "detail": detail });
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    fn matching_response(state: &StyleState) -> (HeaderMap, Json<MatchingResponse>) {
        let version = matching_etag(&state.matching);
        let mut headers = HeaderMap::new();
        headers.insert(ETAG, HeaderValue::from_str(&version).expect("hex is a valid header"));
        let body = MatchingResponse {
            matching: state.matching.to_file(),
            cost: state.cost.clone(),
            version,
        };
        (headers, Json(body))
    }

    pub fn job(&self, id: &str) -> Option<JobRecord> {
        self.jobs.lock().expect("jobs lock").records.get(id).cloned()
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut JobRecord) -> Result<()>) {
        let (state, result) = {
            let mut jobs = self.jobs.lock().expect("jobs lock");
            let Some(job) = jobs.records.get_mut(id) else { return };
            let before = job.state;
            let result = f(job);
            let state = (job.state != before).then_some(job.state);
            if job.state.is_terminal() && jobs.active.as_deref() == Some(id) {
                jobs.active = None;
            }
            (state, result)
        };
        if let Err(e) = result {
            log::warn!("job {id}: {e}");
        }
        if let Some(s) = state {
            let _ = self.journal("job_state", json!({ "job_id": id, "state": s }));
        }
    }

    /// Queues a stylization job and starts it on a worker thread.
    pub fn submit_stylize(self: &Arc<Self>, req: StylizeRequest) -> ApiResult<String> {
        if !self.styles.read().expect("styles lock").contains_key(&req.style_index) {
            return Err(ApiError::not_found(format!("no style with index {}", req.style_index)));
        }
        if req.iterations == 0 {
            return Err(ApiError::invalid("iterations must be ≥ 1"));
        }
        let id = {
            let mut jobs = self.jobs.lock().expect("jobs lock");
            if let Some(active) = &jobs.active {
                return Err(ApiError::new(StatusCode::CONFLICT, format!("job {active} is still running")));
            }
            jobs.next += 1;
            let id = format!("job-{}", jobs.next);
            jobs.records.insert(id.clone(), JobRecord::new(&id, JobKind::Stylize));
            jobs.active = Some(id.clone());
            id
        };
        self.journal(
            "job_queued",
            json!({ "job_id": id, "kind": JobKind::Stylize, "style_index": req.style_index, "iterations": req.iterations }),
        )?;
        let app = Arc::clone(self);
        let job_id = id.clone();
        std::thread::spawn(move || {
            app.update_job(&job_id, JobRecord::start);
            match app.stylize(&job_id, req.style_index, req.iterations) {
                Ok(preview) => app.update_job(&job_id, |j| {
                    j.preview = Some(preview);
                    j.finish()
                }),
                Err(e) => app.update_job(&job_id, |j| j.fail(e.to_string())),
            }
        });
        Ok(id)
    }

    /// Stylizes one style from the reconstructed checkpoint, then renders the
    /// first training camera as the preview.
    fn stylize(&self, id: &str, style: u32, iterations: usize) -> Result<String> {
        let ws = &self.workspace;
        let state = self.styles.read().expect("styles lock")[&style].clone();
        let mut config = ws.config.clone();
        config.stylization.iterations = iterations;
        let header = &ws.checkpoint.header;
        let t = header
            .color_transforms
            .get(style as usize)
            .copied()
            .unwrap_or_else(ColorTransform::identity);
        let prepared = [PreparedStyle {
            content_targets: content_targets(&ws.views, &t, &ws.extractor)?,
            asset: state.asset,
            matching: state.matching,
        }];
        let start = Checkpoint::new(
            ws.checkpoint.model.clone(),
            None,
            header.iteration,
            header.seed,
            header.color_transforms.clone(),
        );
        let mut s = Stylization::new(start, &ws.views, &config, &ws.extractor, &ws.scene, &prepared)?;
        s.set_metrics(MetricsLog::append_to(&ws.dir.metrics())?);
        let ck = s.run(Some(&ws.dir), &mut |p| {
            self.update_job(id, |j| j.set_progress(p.iteration as f64 / p.total as f64))
        })?;
        ck.save(&ws.dir.stylized_checkpoint())?;
        let bytes = self.render_png(&ck, style)?;
        let path = ws.dir.renders().join(format!("latest_s{style}.png"));
        std::fs::create_dir_all(ws.dir.renders()).map_err(|e| Error::io(ws.dir.renders(), e))?;
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(format!("/api/renders/latest?style={style}"))
    }

    fn render_png(&self, ck: &Checkpoint, style: u32) -> Result<Vec<u8>> {
        let ws = &self.workspace;
        let sampling = SamplingConfig {
            samples_per_ray: ws.config.stylization.samples_per_ray,
            stratified: false,
        };
        let view = render_view(&ck.model, &ws.views.cameras[0], style, ws.config.chunk_size, &sampling)?;
        view_outputs(&view)?.0.encode_png()
    }
}

async fn scene_regions(State(app): State<Arc<App>>) -> Json<Vec<RegionCard>> {
    Json(region_cards(&app.workspace.scene.maps, |i| format!("/api/scene/regions/{i}/overlay.png")))
}

async fn scene_overlay(State(app): State<Arc<App>>, UrlPath(id): UrlPath<usize>) -> ApiResult<Response> {
    let ws = &app.workspace;
    // the view where the region is largest
    let best = ws
        .scene
        .maps
        .iter()
        .enumerate()
        .map(|(v, m)| (m.labels.iter().filter(|&&l| l == id as i32).count(), v))
        .max()
        .filter(|(n, _)| *n > 0)
        .ok_or_else(|| ApiError::not_found(format!("scene region {id} does not occur")))?;
    let img = overlay(&ws.views.images[best.1], &ws.scene.maps[best.1], id)?;
    Ok(png(img.encode_png()?))
}

async fn style_regions(State(app): State<Arc<App>>, UrlPath(s): UrlPath<u32>) -> ApiResult<Json<Vec<RegionCard>>> {
    let styles = app.styles.read().expect("styles lock");
    let st = styles.get(&s).ok_or_else(|| ApiError::not_found(format!("no style with index {s}")))?;
    Ok(Json(region_cards(std::slice::from_ref(&st.asset.regions), |i| {
        format!("/api/style/{s}/regions/{i}/overlay.png")
    })))
}

async fn style_overlay(State(app): State<Arc<App>>, UrlPath((s, id)): UrlPath<(u32, usize)>) -> ApiResult<Response> {
    let img = {
        let styles = app.styles.read().expect("styles lock");
        let st = styles.get(&s).ok_or_else(|| ApiError::not_found(format!("no style with index {s}")))?;
        if !st.asset.regions.used_labels().contains(&id) {
            return Err(ApiError::not_found(format!("style {s} has no region {id}")));
        }
        overlay(&st.asset.image, &st.asset.regions, id)?
    };
    Ok(png(img.encode_png()?))
}

async fn get_matching(State(app): State<Arc<App>>, UrlPath(s): UrlPath<u32>) -> ApiResult<impl IntoResponse> {
    let styles = app.styles.read().expect("styles lock");
    let st = styles.get(&s).ok_or_else(|| ApiError::not_found(format!("no style with index {s}")))?;
    Ok(App::matching_response(st))
}

/// Validates and persists an edited matching. Nothing changes unless every
/// check passes.
async fn put_matching(
    State(app): State<Arc<App>>,
    UrlPath(s): UrlPath<u32>,
    headers: HeaderMap,
    body: String,
) -> ApiResult<impl IntoResponse> {
    if let Some(active) = &app.jobs.lock().expect("jobs lock").active {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("job {active} is running; matchings are locked until it ends"),
        ));
    }
    let mut styles = app.styles.write().expect("styles lock");
    let st = styles.get_mut(&s).ok_or_else(|| ApiError::not_found(format!("no style with index {s}")))?;
    if let Some(tag) = headers.get(IF_MATCH) {
        let current = matching_etag(&st.matching);
        if tag.as_bytes() != current.as_bytes() && tag.as_bytes() != b"*" {
            return Err(ApiError::new(
                StatusCode::PRECONDITION_FAILED,
                format!("matching changed since it was loaded (now {current})"),
            ));
        }
    }
    let file = parse_matching_json(&body).map_err(ApiError::invalid)?;
    let mut m = apply_custom_matching(&file, app.workspace.num_scene_regions(), st.asset.regions.count)
        .map_err(ApiError::invalid)?;
    m.check_covers(app.workspace.scene.used_labels()).map_err(ApiError::invalid)?;
    m.freeze();
    let path = app.workspace.dir.matching(s);
    std::fs::write(&path, m.to_json()).map_err(|e| Error::io(&path, e))?;
    st.matching = m;
    app.journal("put_matching", json!({ "style": s, "matching": st.matching.to_file() }))?;
    Ok(App::matching_response(st))
}

async fn post_stylize(State(app): State<Arc<App>>, Json(req): Json<StylizeRequest>) -> ApiResult<Json<JobCreated>> {
    Ok(Json(JobCreated {
        job_id: app.submit_stylize(req)?,
    }))
}

async fn get_job(State(app): State<Arc<App>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobRecord>> {
    app.job(&id).map(Json).ok_or_else(|| ApiError::not_found(format!("no job {id}")))
}

/// The newest stylized preview, or a fresh render of the reconstructed model
/// when the style has not been stylized yet.
async fn latest_render(State(app): State<Arc<App>>, Query(q): Query<StyleQuery>) -> ApiResult<Response> {
    let ws = &app.workspace;
    if q.style >= ws.checkpoint.model.num_styles() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("style {} is out of range for {} styles", q.style, ws.checkpoint.model.num_styles()),
        ));
    }
    let path = ws.dir.renders().join(format!("latest_s{}.png", q.style));
    if let Ok(bytes) = std::fs::read(&path) {
        return Ok(png(bytes));
    }
    let bytes = tokio::task::block_in_place(|| app.render_png(&ws.checkpoint, q.style))?;
    Ok(png(bytes))
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/api/scene/regions", get(scene_regions))
        .route("/api/scene/regions/{id}/overlay.png", get(scene_overlay))
        .route("/api/style/{s}/regions", get(style_regions))
        .route("/api/style/{s}/regions/{id}/overlay.png", get(style_overlay))
        .route("/api/style/{s}/matching", get(get_matching).put(put_matching))
        .route("/api/jobs/stylize", post(post_stylize))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/renders/latest", get(latest_render))
        .with_state(app)
}

/// Opens `run_dir` and serves until the process is stopped.
pub async fn serve(run_dir: &Path, addr: SocketAddr) -> Result<()> {
    let app = App::open(run_dir)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Resource(format!("cannot bind {addr}: {e}")))?;
    log::info!("serving {} on {addr}", run_dir.display());
    axum::serve(listener, router(app))
        .await
        .map_err(|e| Error::Resource(format!("server stopped: {e}")))
}
