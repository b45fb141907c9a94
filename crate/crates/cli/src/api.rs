//! Review API over a shared store.
//!
//! | route | body / query | success |
//! |---|---|---|
//! | `GET /batches` | `?run_id=` | `[BatchView]` |
//! | `GET /batches/{id}/items` | `?stage=&offset=&limit=` | `ItemsView` |
//! | `POST /feedback` | `FeedbackSubmission` | 200 `FeedbackView`, 409 when late |
//! | `GET /invocations/{id}/trace` | | `AuditTrace` |
//! | `GET /subroutines` | | `[SubroutineView]` |
//! | `GET /subroutines/{id}/arms` | | `ArmsView` |
//! | `POST /runs` | `RunRequest` | 202 `RunPlan`, 200 `[BatchReport]` with `wait` |
//!
//! Errors are `{"error": "..."}` with 404 for unknown ids and 422 for
//! invalid input.

use std::collections::BTreeMap;
use std::sync::Arc;

use auditlm::critique::{CritiqueError, PropagationReport, SmeFeedback};
use auditlm::engine::EngineError;
use auditlm::store::{ReviewItem, StoreError};
use auditlm::Choice;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use commentnepa::corpus::validate_corpus;
use commentnepa::{Guidance, Letter, Pipeline, PipelineError, RunConfig, RunInput, Stage};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

/// Header carrying the reviewer id when the body omits it.
pub const REVIEWER_HEADER: &str = "x-reviewer-id";
pub const DEFAULT_LIMIT: usize = 100;

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Unprocessable(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownInvocation(_)
            | StoreError::UnknownSubroutine(_)
            | StoreError::UnknownBatch(_)
            | StoreError::UnknownArm { .. } => ApiError::NotFound(e.to_string()),
            e => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Store(s) => s.into(),
            e => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<CritiqueError> for ApiError {
    fn from(e: CritiqueError) -> Self {
        match e {
            CritiqueError::InvalidRatings(_) | CritiqueError::NotRateable(_) | CritiqueError::NoRatingDimensions(_) => {
                ApiError::Unprocessable(e.to_string())
            }
            CritiqueError::Store(s) => s.into(),
            CritiqueError::Engine(e) => e.into(),
            e => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Store(s) => s.into(),
            PipelineError::Engine(e) => e.into(),
            PipelineError::Critique(c) => c.into(),
            PipelineError::UnknownRun(_) | PipelineError::UnknownLetter(_) => ApiError::NotFound(e.to_string()),
            PipelineError::Input(_) | PipelineError::EmptyCorpus | PipelineError::BadBatchSize => {
                ApiError::Unprocessable(e.to_string())
            }
            e => ApiError::Internal(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    pipeline: Arc<Pipeline>,
    /// Runs execute one at a time.
    runs: Arc<tokio::sync::Mutex<()>>,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>) -> Self {
        Self { pipeline, runs: Arc::new(tokio::sync::Mutex::new(())) }
    }

    pub fn pipeline(&self) -> &Arc<Pipeline> {
        &self.pipeline
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/batches", get(list_batches))
        .route("/batches/{id}/items", get(batch_items))
        .route("/feedback", post(submit_feedback))
        .route("/invocations/{id}/trace", get(trace))
        .route("/subroutines", get(list_subroutines))
        .route("/subroutines/{id}/arms", get(arms))
        .route("/runs", post(start_run))
        .with_state(state)
}

/// Store work is synchronous; keep it off the async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub items: usize,
    /// Items holding at least one reviewer rating.
    pub reviewed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchView {
    pub batch_id: String,
    pub run_id: String,
    pub batch_index: i64,
    pub state: String,
    pub size: i64,
    pub stages: Vec<StageStatus>,
}

fn reviewed(item: &ReviewItem) -> bool {
    item.feedback.iter().any(|f| f.reviewer_id.is_some())
}

#[derive(Debug, Deserialize)]
struct BatchQuery {
    run_id: Option<String>,
}

async fn list_batches(State(s): State<AppState>, Query(q): Query<BatchQuery>) -> ApiResult<Json<Vec<BatchView>>> {
    blocking(move || {
        let store = s.pipeline.engine().store();
        let mut out = Vec::new();
        for b in store.batches()? {
            if q.run_id.as_ref().is_some_and(|r| *r != b.run_id) {
                continue;
            }
            let mut stages = Vec::new();
            for stage in Stage::ALL {
                let items = store.list_review_items(&b.batch_id, stage.as_str())?;
                stages.push(StageStatus {
                    stage: stage.as_str().to_string(),
                    items: items.len(),
                    reviewed: items.iter().filter(|i| reviewed(i)).count(),
                });
            }
            out.push(BatchView {
                batch_id: b.batch_id,
                run_id: b.run_id,
                batch_index: b.batch_index,
                state: b.state,
                size: b.size,
                stages,
            });
        }
        Ok(Json(out))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct ItemsQuery {
    stage: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemsView {
    pub batch_id: String,
    pub stage: String,
    pub total: usize,
    pub offset: usize,
    pub items: Vec<ReviewItem>,
}

async fn batch_items(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ItemsQuery>,
) -> ApiResult<Json<ItemsView>> {
    let stage = q.stage.ok_or_else(|| ApiError::Unprocessable("query parameter `stage` is required".into()))?;
    let stage = Stage::parse(&stage).ok_or_else(|| {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();
        ApiError::Unprocessable(format!("unknown stage `{stage}`; expected one of {}", names.join(", ")))
    })?;
    blocking(move || {
        let all = s.pipeline.engine().store().list_review_items(&id, stage.as_str())?;
        let offset = q.offset.unwrap_or(0);
        let total = all.len();
        let items = all.into_iter().skip(offset).take(q.limit.unwrap_or(DEFAULT_LIMIT)).collect();
        Ok(Json(ItemsView { batch_id: id, stage: stage.as_str().to_string(), total, offset, items }))
    })
    .await
}

/// Reviewer rating of one stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSubmission {
    /// Retrying with the same id is a no-op. Derived from the content when
    /// absent, so an identical resubmission is also a no-op.
    #[serde(default)]
    pub submission_id: Option<String>,
    pub invocation_id: String,
    #[serde(default)]
    pub reviewer_id: Option<String>,
    pub ratings: BTreeMap<String, i64>,
    #[serde(default)]
    pub comment: Option<String>,
}

impl FeedbackSubmission {
    fn derived_id(&self, reviewer: &str) -> String {
        let body = json!([self.invocation_id, reviewer, self.ratings, self.comment]);
        format!("sub_{}", &hex::encode(Sha256::digest(body.to_string().as_bytes()))[..24])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmView {
    pub arm_id: String,
    pub prompt: String,
    pub pulls: u64,
    pub observations: u64,
    pub mean_loss: Option<f64>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmsView {
    pub subroutine_id: String,
    pub name: String,
    pub beta: f64,
    pub trial_index: u64,
    pub explore_loss: f64,
    pub explore_probability: f64,
    pub arms: Vec<ArmView>,
}

fn arms_view(p: &Pipeline, subroutine_id: &str) -> ApiResult<ArmsView> {
    let store = p.engine().store();
    let rec = store.subroutine(subroutine_id)?;
    let state = p.engine().bandit_state(subroutine_id)?;
    let dist = state.sample_distribution();
    let arms = store
        .arms(subroutine_id)?
        .into_iter()
        .map(|a| ArmView {
            probability: dist.probability(&Choice::Arm(a.arm_id.clone())),
            mean_loss: a.mean_loss(),
            arm_id: a.arm_id.to_string(),
            prompt: a.prompt,
            pulls: a.pulls,
            observations: a.observations,
        })
        .collect();
    Ok(ArmsView {
        subroutine_id: subroutine_id.to_string(),
        name: rec.spec.name().to_string(),
        beta: state.beta,
        trial_index: state.trial_index,
        explore_loss: state.explore_loss(),
        explore_probability: dist.explore_probability(),
        arms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackView {
    pub submission_id: String,
    pub late: bool,
    pub report: PropagationReport,
    /// Target subroutine's arms after the update.
    pub subroutine: ArmsView,
}

async fn submit_feedback(
    State(s): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<FeedbackSubmission>,
) -> ApiResult<(StatusCode, Json<FeedbackView>)> {
    let reviewer = body
        .reviewer_id
        .clone()
        .or_else(|| headers.get(REVIEWER_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string))
        .filter(|r| !r.trim().is_empty())
        .ok_or_else(|| ApiError::Unprocessable(format!("reviewer_id is required (body or `{REVIEWER_HEADER}`)")))?;
    let submission_id = body.submission_id.clone().unwrap_or_else(|| body.derived_id(&reviewer));
    blocking(move || {
        let fb = SmeFeedback {
            submission_id: submission_id.clone(),
            invocation_id: body.invocation_id,
            reviewer_id: reviewer,
            ratings: body.ratings,
            comment: body.comment,
        };
        let outcome = s.pipeline.submit_feedback(&fb)?;
        let subroutine = arms_view(&s.pipeline, &outcome.report.subroutine_id)?;
        let status = if outcome.late { StatusCode::CONFLICT } else { StatusCode::OK };
        Ok((
            status,
            Json(FeedbackView { submission_id, late: outcome.late, report: outcome.report, subroutine }),
        ))
    })
    .await
}

async fn trace(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    blocking(move || Ok(Json(s.pipeline.engine().store().trace(&id)?).into_response())).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubroutineView {
    pub subroutine_id: String,
    pub name: String,
    pub arms: usize,
}

async fn list_subroutines(State(s): State<AppState>) -> ApiResult<Json<Vec<SubroutineView>>> {
    blocking(move || {
        let store = s.pipeline.engine().store();
        let mut out = Vec::new();
        for sub in store.subroutines()? {
            out.push(SubroutineView {
                arms: store.arms(&sub.subroutine_id)?.len(),
                name: sub.spec.name().to_string(),
                subroutine_id: sub.subroutine_id,
            });
        }
        Ok(Json(out))
    })
    .await
}

async fn arms(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ArmsView>> {
    blocking(move || Ok(Json(arms_view(&s.pipeline, &id)?))).await
}

#[derive(Debug, Clone, Deserialize)]
pub struct RunRequest {
    pub letters: Vec<Letter>,
    pub guidance: Guidance,
    #[serde(default)]
    pub context: String,
    #[serde(default)]
    pub config: RunConfig,
    /// Respond after every batch is processed instead of immediately.
    #[serde(default)]
    pub wait: bool,
}

async fn start_run(State(s): State<AppState>, Json(req): Json<RunRequest>) -> ApiResult<Response> {
    validate_corpus(&req.letters).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    req.guidance.validate().map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let input = RunInput { letters: req.letters, guidance: req.guidance, context: req.context };
    let p = s.pipeline.clone();
    let config = req.config;
    let plan = blocking(move || Ok(p.plan(&input, &config)?)).await?;

    let lock = s.runs.clone();
    let p = s.pipeline.clone();
    let run_id = plan.run_id.clone();
    let work = async move {
        let _guard = lock.lock().await;
        blocking(move || {
            p.resume(&run_id)?;
            Ok(p.reports(&run_id)?)
        })
        .await
    };
    if req.wait {
        let reports = work.await?;
        return Ok(Json(reports).into_response());
    }
    tokio::spawn(async move {
        if let Err(e) = work.await {
            eprintln!("run failed: {e:?}");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(plan)).into_response())
}

/// Bind and serve until interrupted.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
