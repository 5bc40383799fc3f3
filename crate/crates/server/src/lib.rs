//! HTTP+JSON front of the CoachMe service.
//!
//! Writes take the service lock exclusively and go through the event log;
//! reads share it. Every response carries the log position it observed in
//! `x-coachme-seq`.

pub mod clock;
pub mod settings;

use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use coachme_core::domain::{ActivityCluster, ProfileInput};
use coachme_core::ids::{ChatId, UserId};
use coachme_core::iml::ModelKind;
use coachme_core::planning::ClusterEdit;
use coachme_core::service::CohortFilter;
use coachme_core::{CoachMe, ServiceError};

pub use clock::SystemClock;
pub use settings::Settings;

pub const SEQ_HEADER: &str = "x-coachme-seq";

pub struct App {
    svc: RwLock<CoachMe>,
    token: Option<String>,
}

impl App {
    pub fn new(svc: CoachMe, token: Option<String>) -> Arc<Self> {
        Arc::new(App {
            svc: RwLock::new(svc),
            token,
        })
    }

    /// Runs `f` with exclusive access, e.g. to flush on shutdown.
    pub fn with_service<T>(&self, f: impl FnOnce(&mut CoachMe) -> T) -> T {
        let mut svc = self.svc.write().unwrap_or_else(|e| e.into_inner());
        f(&mut svc)
    }

    fn read<T: Serialize>(
        &self,
        f: impl FnOnce(&CoachMe) -> Result<T, ApiError>,
    ) -> Result<Response, ApiError> {
        let svc = self.svc.read().map_err(|_| ApiError::poisoned())?;
        let body = f(&svc)?;
        Ok(json(StatusCode::OK, svc.log().last_seq(), &body))
    }

    fn write<T: Serialize>(
        &self,
        status: StatusCode,
        f: impl FnOnce(&mut CoachMe) -> Result<T, ApiError>,
    ) -> Result<Response, ApiError> {
        let mut svc = self.svc.write().map_err(|_| ApiError::poisoned())?;
        let body = f(&mut svc)?;
        Ok(json(status, svc.log().last_seq(), &body))
    }
}

fn json<T: Serialize>(status: StatusCode, seq: u64, body: &T) -> Response {
    let bytes = match serde_json::to_vec(body) {
        Ok(b) => b,
        Err(e) => return ApiError::internal(e.to_string()).into_response(),
    };
    (
        status,
        [
            (
                header::CONTENT_TYPE,
                HeaderValue::from_static("application/json"),
            ),
            (
                header::HeaderName::from_static(SEQ_HEADER),
                HeaderValue::from(seq),
            ),
        ],
        bytes,
    )
        .into_response()
}

/// `{code, message}` error body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "ValidationError", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "StorageFailure", message)
    }

    fn poisoned() -> Self {
        Self::internal("service lock poisoned")
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let code = e.code();
        let status = match code {
            "UnknownUser" | "UnknownPlan" | "UnknownTemplate" | "UnknownActivity"
            | "UnknownCluster" | "UnknownChat" => StatusCode::NOT_FOUND,
            "DuplicateChat" | "NoAssignedPlan" | "PayloadInvalid" => StatusCode::CONFLICT,
            "StorageFailure" | "CorruptLine" | "VersionMismatch" => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, axum::Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::invalid(format!("request body: {e}")))
}

/// Accepts `u7` or a bare `7`.
fn user_id(raw: &str) -> Result<UserId, ApiError> {
    raw.parse()
        .or_else(|_| raw.parse::<u64>().map(UserId))
        .map_err(|_| ApiError::invalid(format!("bad user id {raw:?}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub chat_id: ChatId,
    pub profile: ProfileInput,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanRequest {
    pub template_id: String,
    /// Defaults to today.
    #[serde(default)]
    pub week_start: Option<NaiveDate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineRequest {
    pub template_id: String,
    /// Last day of the judged window; defaults to yesterday.
    #[serde(default)]
    pub as_of: Option<NaiveDate>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AsOf {
    #[serde(default)]
    pub as_of: Option<NaiveDate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BroadcastRequest {
    pub text: String,
    /// `all` (default) or `type:Passive` etc.
    #[serde(default)]
    pub filter: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BroadcastResponse {
    pub filter: String,
    pub recipients: usize,
    pub messages: Vec<coachme_core::bot::OutboundMessage>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConfirmRequest {
    /// The proposal being edited; the current proposal when absent.
    #[serde(default)]
    pub proposed: Option<Vec<ActivityCluster>>,
    #[serde(default)]
    pub edits: Vec<ClusterEdit>,
}

fn as_of(q: Result<Query<AsOf>, QueryRejection>, svc: &CoachMe) -> Result<NaiveDate, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::invalid(e.body_text()))?;
    Ok(q.as_of.unwrap_or_else(|| svc.today()))
}

async fn register(State(app): State<Arc<App>>, raw: Bytes) -> ApiResult {
    let req: RegisterRequest = body(&raw)?;
    app.write(StatusCode::CREATED, |svc| {
        Ok(svc.register_user(&req.profile, req.chat_id)?)
    })
}

async fn assign(State(app): State<Arc<App>>, Path(id): Path<String>, raw: Bytes) -> ApiResult {
    let user = user_id(&id)?;
    let req: PlanRequest = body(&raw)?;
    app.write(StatusCode::CREATED, |svc| {
        let week_start = req.week_start.unwrap_or_else(|| svc.today());
        Ok(svc.assign_plan(user, &req.template_id, week_start)?)
    })
}

async fn refine(State(app): State<Arc<App>>, Path(id): Path<String>, raw: Bytes) -> ApiResult {
    let user = user_id(&id)?;
    let req: RefineRequest = body(&raw)?;
    app.write(StatusCode::CREATED, |svc| {
        let as_of = req
            .as_of
            .unwrap_or_else(|| svc.today().pred_opt().expect("date in range"));
        Ok(svc.refine_plan(user, &req.template_id, as_of)?)
    })
}

async fn ranking(State(app): State<Arc<App>>, q: Result<Query<AsOf>, QueryRejection>) -> ApiResult {
    app.read(|svc| Ok(svc.ranking(as_of(q, svc)?)?))
}

async fn detail(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    q: Result<Query<AsOf>, QueryRejection>,
) -> ApiResult {
    let user = user_id(&id)?;
    app.read(|svc| Ok(svc.user_detail(user, as_of(q, svc)?)?))
}

async fn broadcast(State(app): State<Arc<App>>, raw: Bytes) -> ApiResult {
    let req: BroadcastRequest = body(&raw)?;
    let filter: CohortFilter = req.filter.as_deref().unwrap_or("all").parse()?;
    app.write(StatusCode::OK, |svc| {
        let messages = svc.broadcast(&req.text, filter)?;
        Ok(BroadcastResponse {
            filter: filter.to_string(),
            recipients: messages.len(),
            messages,
        })
    })
}

async fn proposed_clusters(State(app): State<Arc<App>>) -> ApiResult {
    app.read(|svc| Ok(svc.propose_clusters()))
}

async fn confirm_clusters(State(app): State<Arc<App>>, raw: Bytes) -> ApiResult {
    let req: ConfirmRequest = body(&raw)?;
    app.write(StatusCode::OK, |svc| {
        let proposed = req.proposed.unwrap_or_else(|| svc.propose_clusters());
        Ok(svc.confirm_clusters(&proposed, &req.edits)?)
    })
}

async fn bot_update(State(app): State<Arc<App>>, raw: Bytes) -> ApiResult {
    app.write(StatusCode::OK, |svc| Ok(svc.handle_update(&raw)?))
}

async fn due(State(app): State<Arc<App>>) -> ApiResult {
    app.write(StatusCode::OK, |svc| Ok(svc.collect_due()?))
}

async fn model(State(app): State<Arc<App>>, Path(kind): Path<String>) -> ApiResult {
    let kind = match kind.as_str() {
        "pre" => ModelKind::Pre,
        "post" => ModelKind::Post,
        _ => return Err(ApiError::invalid(format!("unknown model {kind:?}"))),
    };
    let svc = app.svc.read().map_err(|_| ApiError::poisoned())?;
    let export = svc.export_model(kind);
    Ok((
        StatusCode::OK,
        [
            (
                header::CONTENT_TYPE,
                HeaderValue::from_static("application/json"),
            ),
            (
                header::HeaderName::from_static(SEQ_HEADER),
                HeaderValue::from(svc.log().last_seq()),
            ),
        ],
        export,
    )
        .into_response())
}

async fn auth(State(app): State<Arc<App>>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "Unauthorized",
                "missing or bad bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint")
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/users", post(register))
        .route("/users/{id}", get(detail))
        .route("/users/{id}/plan", post(assign))
        .route("/users/{id}/refine", post(refine))
        .route("/ranking", get(ranking))
        .route("/broadcast", post(broadcast))
        .route("/clusters/proposed", get(proposed_clusters))
        .route("/clusters/confirm", post(confirm_clusters))
        .route("/bot/update", post(bot_update))
        .route("/notifications/due", get(due))
        .route("/models/{kind}", get(model))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(app.clone(), auth))
        .with_state(app)
}
