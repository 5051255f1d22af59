//! REST facade over the session engine.
//!
//! | method | path | body / query | success |
//! |---|---|---|---|
//! | POST | `/sessions` | [`CreateSessionRequest`] | 201 [`CreateSessionResponse`] |
//! | GET | `/sessions/{id}/status` | | 200 `StatusView` |
//! | GET | `/sessions/{id}/allocation` | | 200 `AllocationView` |
//! | POST | `/sessions/{id}/labels` | [`LabelsRequest`] | 200 [`RecordResponse`] |
//! | GET | `/sessions/{id}/prediction` | `method=simulate\|rate`, `replications`, `seed`, `horizon` | 200 [`PredictionResponse`] |
//! | GET | `/sessions/{id}/history` | | 200 `HistoryView` |
//!
//! Every body carries `schema_version` and the session's completed `wave`
//! count. Label submissions name the wave they answer; a mismatch is a 409
//! so two browser tabs cannot both record the same wave.

mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use multiwave::cohort::{gen_cohort, Cohort, ScenarioConfig, StratumSpec};
use multiwave::engine::{
    EngineError, ReviewRecord, SessionConfig, SessionState, StopDecision, SESSION_SCHEMA_VERSION,
};
use multiwave::forecast::{
    predict_session_rate, predict_stopping_sim, ForecastError, ForecastMethod, ForecastResult,
    DEFAULT_HORIZON, DEFAULT_REPLICATIONS,
};
use serde::{Deserialize, Deserializer, Serialize};

pub use store::{SessionHandle, SessionStore};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub token: Option<String>,
}

impl AppState {
    pub fn open(dir: impl Into<PathBuf>, token: Option<String>) -> Result<Self, EngineError> {
        Ok(Self {
            store: Arc::new(SessionStore::open(dir)?),
            token,
        })
    }
}

/// Error body: a machine-readable code, a message, and where applicable the
/// session wave and the patient ids at fault.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema_version: u32,
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wave: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offending_ids: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                schema_version: SESSION_SCHEMA_VERSION,
                error: error.into(),
                message: message.into(),
                wave: None,
                offending_ids: Vec::new(),
            },
        }
    }

    fn at_wave(mut self, wave: usize) -> Self {
        self.body.wave = Some(wave);
        self
    }

    fn not_found(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("no session {id}"),
        )
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let msg = e.to_string();
        match e {
            EngineError::Validation(_) | EngineError::Cohort(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", msg)
            }
            EngineError::Stopped(_) => Self::new(StatusCode::CONFLICT, "session_stopped", msg),
            EngineError::Exhausted => Self::new(StatusCode::CONFLICT, "session_exhausted", msg),
            EngineError::NoPending => Self::new(StatusCode::CONFLICT, "no_pending_allocation", msg),
            EngineError::Mismatch(m) => {
                let mut err = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "label_mismatch", msg);
                err.body.offending_ids = m.offending_ids();
                err
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), "invalid_body", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientInput {
    pub patient_id: String,
    pub covariate: f64,
}

/// Either an explicit patient list or a synthetic scenario (for demos).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortInput {
    #[serde(default)]
    pub boundaries: Option<Vec<f64>>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub patients: Option<Vec<PatientInput>>,
    #[serde(default)]
    pub synthetic: Option<ScenarioConfig>,
}

impl CohortInput {
    fn build(self) -> Result<Cohort, EngineError> {
        let spec = match self.boundaries {
            Some(b) => StratumSpec::new(b, self.labels)?,
            None => StratumSpec::frailty(),
        };
        match (self.patients, self.synthetic) {
            (Some(p), None) => {
                let (ids, cov): (Vec<String>, Vec<f64>) =
                    p.into_iter().map(|p| (p.patient_id, p.covariate)).unzip();
                Ok(Cohort::from_covariates(ids, &cov, spec)?)
            }
            (None, Some(s)) => Ok(gen_cohort(&s, &spec)?),
            _ => Err(EngineError::Validation(vec![
                "cohort needs exactly one of `patients` or `synthetic`".into(),
            ])),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub config: SessionConfig,
    pub cohort: CohortInput,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub schema_version: u32,
    pub id: String,
    pub wave: usize,
    pub decision: StopDecision,
}

/// A reference label: JSON `true`/`false` or `1`/`0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BinaryLabel(pub bool);

impl<'de> Deserialize<'de> for BinaryLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Bool(b) => Ok(Self(b)),
            serde_json::Value::Number(n) if n.as_u64() == Some(1) => Ok(Self(true)),
            serde_json::Value::Number(n) if n.as_u64() == Some(0) => Ok(Self(false)),
            other => Err(serde::de::Error::custom(format!(
                "label must be true/false or 1/0, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelInput {
    pub patient_id: String,
    pub label: BinaryLabel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsRequest {
    /// Index of the wave these labels answer (the pending allocation's wave).
    pub wave: usize,
    pub labels: Vec<LabelInput>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecordResponse {
    pub schema_version: u32,
    pub wave: usize,
    pub decision: StopDecision,
}

#[derive(Debug, Deserialize)]
pub struct PredictionQuery {
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub replications: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub schema_version: u32,
    pub wave: usize,
    pub forecast: ForecastResult,
}

async fn handle(state: &AppState, id: &str) -> ApiResult<SessionHandle> {
    state
        .store
        .get(id)
        .await
        .ok_or_else(|| ApiError::not_found(id))
}

/// Apply `op` to a copy of the session, persist the copy if it changed, then
/// publish it. Runs under the session's write lock.
async fn mutate<T>(
    state: &AppState,
    id: &str,
    op: impl FnOnce(&mut SessionState) -> ApiResult<T>,
) -> ApiResult<(T, usize)> {
    let session = handle(state, id).await?;
    let mut guard = session.write().await;
    let mut next = guard.clone();
    let result = op(&mut next);
    if next != *guard {
        state.store.persist(id, &next)?;
        *guard = next;
    }
    let wave = guard.wave();
    result.map(|v| (v, wave)).map_err(|e| e.at_wave(wave))
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<CreateSessionResponse>)> {
    let Json(req) = body?;
    let cohort = req.cohort.build()?;
    let session = SessionState::create(req.config, cohort)?;
    let decision = session.status.clone();
    let id = state.store.insert(session).await?;
    Ok((
        StatusCode::CREATED,
        Json(CreateSessionResponse {
            schema_version: SESSION_SCHEMA_VERSION,
            id,
            wave: 0,
            decision,
        }),
    ))
}

async fn get_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = handle(&state, &id).await?;
    let view = session.read().await.status_view();
    Ok(Json(view).into_response())
}

async fn get_history(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = handle(&state, &id).await?;
    let view = session.read().await.history_view();
    Ok(Json(view).into_response())
}

async fn get_allocation(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let (view, _) = mutate(&state, &id, |s| {
        s.next_allocation()?;
        Ok(s.allocation_view().expect("allocation pending"))
    })
    .await?;
    Ok(Json(view).into_response())
}

async fn post_labels(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<LabelsRequest>, JsonRejection>,
) -> ApiResult<Json<RecordResponse>> {
    // Unknown sessions are 404 even when the body is malformed.
    handle(&state, &id).await?;
    let Json(req) = body?;
    let records: Vec<ReviewRecord> = req
        .labels
        .iter()
        .map(|l| ReviewRecord::new(l.patient_id.clone(), l.label.0))
        .collect();
    let (decision, wave) = mutate(&state, &id, |s| {
        if s.is_terminal() {
            return Err(EngineError::Stopped(s.status.status).into());
        }
        let expected = s.pending.as_ref().map(|p| p.allocation.wave);
        if expected != Some(req.wave) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "stale_wave",
                match expected {
                    Some(w) => format!("labels are for wave {}, pending wave is {w}", req.wave),
                    None => format!("labels are for wave {}, no wave is pending", req.wave),
                },
            ));
        }
        Ok(s.record_wave(&records)?.clone())
    })
    .await?;
    Ok(Json(RecordResponse {
        schema_version: SESSION_SCHEMA_VERSION,
        wave,
        decision,
    }))
}

async fn get_prediction(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PredictionQuery>,
) -> ApiResult<Json<PredictionResponse>> {
    let session = handle(&state, &id).await?;
    let snapshot = session.read().await.clone();
    let wave = snapshot.wave();
    let method: ForecastMethod =
        q.method
            .as_deref()
            .unwrap_or("simulate")
            .parse()
            .map_err(|e: ForecastError| {
                ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string())
            })?;
    let horizon = q.horizon.unwrap_or(DEFAULT_HORIZON);
    let reps = q.replications.unwrap_or(DEFAULT_REPLICATIONS);
    let seed = q.seed.unwrap_or(snapshot.config.seed);
    let forecast = tokio::task::spawn_blocking(move || match method {
        ForecastMethod::Simulate => predict_stopping_sim(&snapshot, reps, seed, horizon),
        ForecastMethod::Rate => predict_session_rate(&snapshot, horizon),
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
    .map_err(|e| {
        let status = match e {
            ForecastError::NoData => StatusCode::CONFLICT,
            ForecastError::InvalidInput(_) => StatusCode::BAD_REQUEST,
            ForecastError::Interval(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, "forecast_unavailable", e.to_string()).at_wave(wave)
    })?;
    Ok(Json(PredictionResponse {
        schema_version: SESSION_SCHEMA_VERSION,
        wave,
        forecast,
    }))
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or bad token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/status", get(get_status))
        .route("/sessions/{id}/allocation", get(get_allocation))
        .route("/sessions/{id}/labels", post(post_labels))
        .route("/sessions/{id}/prediction", get(get_prediction))
        .route("/sessions/{id}/history", get(get_history))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serve until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
