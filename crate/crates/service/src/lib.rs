//! JSON API over an engine home. Reads reflect committed state only;
//! mutations go through the same [`Engine`] calls as the CLI.

mod error;
mod images;
mod page;

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{FromRequestParts, Path, State};
use axum::http::request::Parts;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};

use ami_core::engine::Engine;
use ami_core::inference::ModelSpec;
use ami_core::pipeline::{FrameRecord, JobSpec, JobState, PipelineError, PipelineJob, Progress, Session};
use ami_core::synthgen::{CropInfo, ReviewState};
use ami_core::taxonomy::{lineage, Lineage, RollupLevel, TaxonKey, TaxonRecord};
use ami_core::tracking::TrackLine;

pub use error::{ApiError, ErrorCode};
pub use page::{Page, PageQuery, MAX_LIMIT};

pub const DEFAULT_BIND: &str = "127.0.0.1:8787";

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    poll: Duration,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        AppState { engine: Arc::new(engine), poll: Duration::from_millis(250) }
    }

    /// Interval at which the event stream re-reads the job table.
    pub fn with_poll_interval(mut self, poll: Duration) -> Self {
        self.poll = poll;
        self
    }
}

/// Runs a blocking engine call off the async workers.
async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&Engine) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let engine = state.engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::new(ErrorCode::BackendFailure, format!("request task failed: {e}")))?
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/deployments", get(deployments))
        .route("/api/sessions", get(sessions))
        .route("/api/sessions/:id/frames", get(frames))
        .route("/api/sessions/:id/detections", get(detections))
        .route("/api/sessions/:id/tracks", get(tracks))
        .route("/api/sessions/:id/counts", get(counts))
        .route("/api/jobs", get(list_jobs).post(create_job))
        .route("/api/jobs/:id", get(job))
        .route("/api/jobs/:id/cancel", post(cancel_job))
        .route("/api/jobs/:id/retry", post(retry_job))
        .route("/api/jobs/:id/events", get(job_events))
        .route("/api/crops", get(list_crops))
        .route("/api/crops/:id", get(crop).patch(patch_crop))
        .route("/api/taxa/:key", get(taxon))
        .route("/api/models", get(models))
        .route("/api/frames/:id/image", get(images::frame_image))
        .route("/api/detections/:id/crop", get(images::detection_crop))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Query-string extractor whose rejections are `invalid_input` errors.
pub struct ApiQuery<T>(pub T);

#[axum::async_trait]
impl<T, S> FromRequestParts<S> for ApiQuery<T>
where
    T: serde::de::DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        axum::extract::Query::<T>::from_request_parts(parts, state)
            .await
            .map(|q| ApiQuery(q.0))
            .map_err(|e| ApiError::invalid(e.body_text()))
    }
}

// ---- sessions ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub deployment_id: String,
    pub night_of: String,
    pub frames: usize,
}

impl From<&Session> for SessionSummary {
    fn from(s: &Session) -> Self {
        SessionSummary {
            session_id: s.session_id.clone(),
            deployment_id: s.deployment_id.clone(),
            night_of: s.night_of.to_string(),
            frames: s.frames.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameInfo {
    pub frame_id: String,
    pub index: usize,
    pub capture_time: String,
    pub time_source: ami_core::pipeline::TimeSource,
}

async fn deployments(State(s): State<AppState>) -> Result<Json<Vec<ami_core::engine::DeploymentSummary>>, ApiError> {
    Ok(Json(blocking(&s, |e| Ok(e.deployments()?)).await?))
}

#[derive(Debug, Deserialize)]
struct SessionsQuery {
    deployment: Option<String>,
    #[serde(flatten)]
    page: PageQuery,
}

async fn sessions(State(s): State<AppState>, ApiQuery(q): ApiQuery<SessionsQuery>) -> Result<Json<Page<SessionSummary>>, ApiError> {
    let all = blocking(&s, move |e| Ok(e.sessions(q.deployment.as_deref())?)).await?;
    let items: Vec<SessionSummary> = all.iter().map(SessionSummary::from).collect();
    Ok(Json(q.page.apply(items)?))
}

async fn frames(State(s): State<AppState>, Path(id): Path<String>, ApiQuery(q): ApiQuery<PageQuery>) -> Result<Json<Page<FrameInfo>>, ApiError> {
    let session = blocking(&s, move |e| Ok(e.session(&id)?)).await?;
    let items = session
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| FrameInfo {
            frame_id: session.frame_id(i),
            index: i,
            capture_time: f.capture_time.to_string(),
            time_source: f.time_source,
        })
        .collect();
    Ok(Json(q.apply(items)?))
}

// ---- results ----

async fn detections(State(s): State<AppState>, Path(id): Path<String>, ApiQuery(q): ApiQuery<PageQuery>) -> Result<Json<Page<FrameRecord>>, ApiError> {
    let rows = blocking(&s, move |e| Ok(e.detections(&id)?)).await?;
    Ok(Json(q.apply(rows)?))
}

async fn tracks(State(s): State<AppState>, Path(id): Path<String>, ApiQuery(q): ApiQuery<PageQuery>) -> Result<Json<Page<TrackLine>>, ApiError> {
    let rows = blocking(&s, move |e| Ok(e.tracks(&id)?)).await?;
    Ok(Json(q.apply(rows)?))
}

#[derive(Debug, Deserialize)]
struct CountsQuery {
    level: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountsResponse {
    pub session_id: String,
    pub level: String,
    pub counts: BTreeMap<TaxonKey, u64>,
    pub total: u64,
    pub tracks: usize,
    pub frames: usize,
    pub frames_failed: usize,
}

async fn counts(State(s): State<AppState>, Path(id): Path<String>, ApiQuery(q): ApiQuery<CountsQuery>) -> Result<Json<CountsResponse>, ApiError> {
    let level = q.level.unwrap_or_else(|| "species".into());
    if !matches!(level.as_str(), "species" | "genus" | "family") {
        return Err(ApiError::invalid(format!("level must be species, genus or family, not {level:?}")));
    }
    let sid = id.clone();
    let c = blocking(&s, move |e| Ok(e.counts(&sid)?)).await?;
    let map = match level.as_str() {
        "species" => c.counts.species,
        "genus" => c.counts.genus,
        _ => c.counts.family,
    };
    if map.is_empty() && c.tracks > 0 {
        return Err(ApiError::new(ErrorCode::NotFound, format!("no {level} rollup: the engine has no taxonomy backbone")));
    }
    Ok(Json(CountsResponse {
        session_id: id,
        level,
        total: map.values().sum(),
        counts: map,
        tracks: c.tracks,
        frames: c.frames,
        frames_failed: c.frames_failed,
    }))
}

// ---- jobs ----

#[derive(Debug, Deserialize)]
struct JobsQuery {
    state: Option<JobState>,
    #[serde(flatten)]
    page: PageQuery,
}

async fn list_jobs(State(s): State<AppState>, ApiQuery(q): ApiQuery<JobsQuery>) -> Result<Json<Page<PipelineJob>>, ApiError> {
    let mut jobs = blocking(&s, |e| Ok(e.jobs()?)).await?;
    if let Some(st) = q.state {
        jobs.retain(|j| j.state == st);
    }
    Ok(Json(q.page.apply(jobs)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateJob {
    pub session_id: String,
    #[serde(flatten)]
    pub spec: JobSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateJobResponse {
    pub job: PipelineJob,
    pub existing: bool,
}

async fn create_job(State(s): State<AppState>, body: Result<Json<CreateJob>, axum::extract::rejection::JsonRejection>) -> Result<Json<CreateJobResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let out = blocking(&s, move |e| {
        let (id, created) = e.enqueue(&req.session_id, req.spec)?;
        Ok(CreateJobResponse { job: e.job(&id)?, existing: !created })
    })
    .await?;
    Ok(Json(out))
}

async fn job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<PipelineJob>, ApiError> {
    Ok(Json(blocking(&s, move |e| Ok(e.job(&id)?)).await?))
}

async fn cancel_job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<PipelineJob>, ApiError> {
    Ok(Json(blocking(&s, move |e| Ok(e.cancel(&id)?)).await?))
}

async fn retry_job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<PipelineJob>, ApiError> {
    Ok(Json(blocking(&s, move |e| Ok(e.retry(&id)?)).await?))
}

/// Payload of each `progress` event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub job_id: String,
    pub state: JobState,
    pub progress: Progress,
    pub error: Option<String>,
}

impl From<&PipelineJob> for ProgressEvent {
    fn from(j: &PipelineJob) -> Self {
        ProgressEvent { job_id: j.job_id.clone(), state: j.state, progress: j.progress, error: j.error.clone() }
    }
}

fn terminal(s: JobState) -> bool {
    matches!(s, JobState::Completed | JobState::Failed | JobState::Cancelled)
}

/// Server-sent `progress` events, one per observed change, ending after the
/// job reaches a terminal state.
async fn job_events(
    State(s): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let first = {
        let id = id.clone();
        blocking(&s, move |e| Ok(e.job(&id)?)).await?
    };
    struct Cursor {
        state: AppState,
        id: String,
        last: Option<ProgressEvent>,
        pending: Option<ProgressEvent>,
        done: bool,
    }
    let start = Cursor { state: s, id, last: None, pending: Some(ProgressEvent::from(&first)), done: false };
    let stream = futures::stream::unfold(start, |mut c| async move {
        loop {
            if let Some(ev) = c.pending.take() {
                c.done = terminal(ev.state);
                c.last = Some(ev.clone());
                let data = serde_json::to_string(&ev).expect("event serializes");
                return Some((Ok(Event::default().event("progress").data(data)), c));
            }
            if c.done {
                return None;
            }
            tokio::time::sleep(c.state.poll).await;
            let id = c.id.clone();
            match blocking(&c.state, move |e| Ok(e.job(&id)?)).await {
                Ok(job) => {
                    let ev = ProgressEvent::from(&job);
                    if c.last.as_ref() != Some(&ev) {
                        c.pending = Some(ev);
                    }
                }
                Err(err) => {
                    c.done = true;
                    let data = serde_json::to_string(&err).expect("error serializes");
                    return Some((Ok(Event::default().event("error").data(data)), c));
                }
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

// ---- crops, taxa, models ----

#[derive(Debug, Deserialize)]
struct CropsQuery {
    review_state: Option<ReviewState>,
    #[serde(flatten)]
    page: PageQuery,
}

async fn list_crops(State(s): State<AppState>, ApiQuery(q): ApiQuery<CropsQuery>) -> Result<Json<Page<CropInfo>>, ApiError> {
    let mut crops = blocking(&s, |e| Ok(e.crops()?.list()?)).await?;
    if let Some(st) = q.review_state {
        crops.retain(|c| c.review_state == st);
    }
    Ok(Json(q.page.apply(crops)?))
}

async fn crop(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<CropInfo>, ApiError> {
    Ok(Json(blocking(&s, move |e| Ok(e.crops()?.info(&id)?)).await?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CropPatch {
    pub review_state: ReviewState,
}

async fn patch_crop(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<CropPatch>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<CropInfo>, ApiError> {
    let Json(p) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    Ok(Json(blocking(&s, move |e| Ok(e.crops()?.set_state(&id, p.review_state)?)).await?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonResponse {
    pub record: TaxonRecord,
    pub lineage: Lineage,
    /// Accepted names along the lineage, keyed by rank.
    pub names: BTreeMap<String, String>,
}

async fn taxon(State(s): State<AppState>, Path(key): Path<String>) -> Result<Json<TaxonResponse>, ApiError> {
    let key: TaxonKey = key.parse().map_err(|_| ApiError::invalid(format!("taxon key {key:?} is not an integer")))?;
    let out = blocking(&s, move |e| {
        let bb = e
            .backbone()
            .ok_or_else(|| ApiError::new(ErrorCode::NotFound, "the engine has no taxonomy backbone"))?;
        let record = bb.get(key).cloned().ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("taxon {key}")))?;
        let lin = lineage(key, bb)?;
        let mut names = BTreeMap::new();
        let mut put = |rank: &str, k: Option<TaxonKey>| {
            if let Some(r) = k.and_then(|k| bb.get(k)) {
                names.insert(rank.to_string(), r.scientific_name.clone());
            }
        };
        put("species", lin.species);
        put("genus", lin.at(RollupLevel::Genus));
        put("family", lin.at(RollupLevel::Family));
        Ok(TaxonResponse { record, lineage: lin, names })
    })
    .await?;
    Ok(Json(out))
}

async fn models(State(s): State<AppState>) -> Result<Json<Vec<ModelSpec>>, ApiError> {
    Ok(Json(blocking(&s, |e| Ok(e.models()?)).await?))
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::NotFound(_) => ErrorCode::NotFound,
            PipelineError::Usage(_) => ErrorCode::InvalidInput,
            PipelineError::Conflict(_) | PipelineError::LeaseLost(_) => ErrorCode::Conflict,
            PipelineError::Backend(_) | PipelineError::Data(_) | PipelineError::Io { .. } => ErrorCode::BackendFailure,
        };
        ApiError::new(code, e.to_string())
    }
}
