//! HTTP routes over [`Service`].

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use drscreen::analytics::Period;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::service::{DecisionRequest, ImageVariant, Service, ServiceError};
use crate::sidecar::StudyBundle;
use crate::state::{SortMode, Status};

/// Upper bound on a study bundle upload.
pub const MAX_BODY_BYTES: usize = 256 * 1024 * 1024;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    pub retriable: bool,
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl ApiError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        match &self.0 {
            ServiceError::NotFound(_) | ServiceError::ImageNotFound { .. } => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::ProposalMissing(_) => (StatusCode::PRECONDITION_FAILED, "proposal_missing"),
            ServiceError::Pending(_) => (StatusCode::ACCEPTED, "pending"),
            ServiceError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable"),
            ServiceError::Screening(_) => (StatusCode::UNPROCESSABLE_ENTITY, "screening_failed"),
            ServiceError::Analytics(_) => (StatusCode::UNPROCESSABLE_ENTITY, "analytics_failed"),
            ServiceError::Config(_) | ServiceError::Store(_) | ServiceError::State(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        let body = ErrorBody { error: code.into(), message: self.0.to_string(), retriable: self.0.is_retriable() };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/studies", post(register))
        .route("/studies/{id}", get(study))
        .route("/studies/{id}/proposal", post(proposal))
        .route("/studies/{id}/images/{image_id}", get(image))
        .route("/studies/{id}/decision", post(decision))
        .route("/worklist", get(worklist))
        .route("/stats/annual", get(annual))
        .route("/stats/gp-table", get(gp_table))
        .route("/stats/workload", get(workload))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(service)
}

/// Runs blocking service work off the async executor.
async fn blocking<T, F>(service: &Arc<Service>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
{
    let s = service.clone();
    tokio::task::spawn_blocking(move || f(&s))
        .await
        .map_err(|e| ApiError(ServiceError::Screening(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn register(State(s): State<Arc<Service>>, Json(bundle): Json<StudyBundle>) -> ApiResult<Response> {
    let outcome = blocking(&s, move |s| s.register(&bundle)).await?;
    let status = if outcome.created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(outcome)).into_response())
}

async fn study(State(s): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.study(&id)?).into_response())
}

fn pending(id: &str) -> Response {
    (StatusCode::ACCEPTED, Json(json!({ "study_id": id, "status": "pending", "retriable": true }))).into_response()
}

async fn proposal(State(s): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    if let Some(p) = s.proposal(&id)? {
        return Ok(Json(p).into_response());
    }
    let Some(guard) = s.begin_compute(&id) else {
        return Ok(pending(&id));
    };
    let svc = s.clone();
    let task_id = id.clone();
    let task = tokio::task::spawn_blocking(move || {
        let _guard = guard;
        svc.compute_proposal(&task_id)
    });
    match tokio::time::timeout(s.inference_timeout(), task).await {
        Ok(joined) => {
            let p = joined.map_err(|e| ApiError(ServiceError::Screening(format!("worker failed: {e}"))))??;
            Ok(Json(p).into_response())
        }
        // The computation keeps running and is persisted when it finishes.
        Err(_) => Ok(pending(&id)),
    }
}

#[derive(Debug, Deserialize)]
struct ImageQuery {
    #[serde(default)]
    variant: Option<ImageVariant>,
}

async fn image(
    State(s): State<Arc<Service>>,
    Path((id, image_id)): Path<(String, String)>,
    Query(q): Query<ImageQuery>,
) -> ApiResult<Response> {
    let variant = q.variant.unwrap_or(ImageVariant::Original);
    let bytes = blocking(&s, move |s| s.image(&id, &image_id, variant)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn decision(
    State(s): State<Arc<Service>>,
    Path(id): Path<String>,
    Json(req): Json<DecisionRequest>,
) -> ApiResult<Response> {
    let d = blocking(&s, move |s| s.record_decision(&id, &req)).await?;
    Ok((StatusCode::CREATED, Json(d)).into_response())
}

#[derive(Debug, Deserialize)]
struct WorklistQuery {
    #[serde(default)]
    sort: Option<SortMode>,
    #[serde(default)]
    status: Option<Status>,
}

async fn worklist(State(s): State<Arc<Service>>, Query(q): Query<WorklistQuery>) -> ApiResult<Response> {
    Ok(Json(s.worklist(q.sort.unwrap_or_default(), q.status)).into_response())
}

#[derive(Debug, Deserialize)]
struct YearQuery {
    #[serde(default)]
    year: Option<i32>,
}

async fn annual(State(s): State<Arc<Service>>, Query(q): Query<YearQuery>) -> ApiResult<Response> {
    let rows = s.annual(q.year)?;
    Ok(match q.year {
        Some(_) => Json(&rows[0]).into_response(),
        None => Json(rows).into_response(),
    })
}

#[derive(Debug, Deserialize)]
struct PeriodQuery {
    #[serde(default)]
    from: Option<NaiveDate>,
    #[serde(default)]
    to: Option<NaiveDate>,
}

async fn gp_table(State(s): State<Arc<Service>>, Query(q): Query<PeriodQuery>) -> ApiResult<Response> {
    Ok(Json(s.gp_table(Period { from: q.from, to: q.to })?).into_response())
}

async fn workload(State(s): State<Arc<Service>>) -> ApiResult<Response> {
    Ok(Json(s.workload()?).into_response())
}

async fn health(State(s): State<Arc<Service>>) -> Json<crate::service::Health> {
    Json(s.health())
}

/// Serves until ctrl-c.
pub async fn serve(service: Arc<Service>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
