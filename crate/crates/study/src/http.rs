//! JSON-over-HTTP front end for [`StudyService`].

use std::str::FromStr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cxr_core::evalkit::Arm;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

use crate::config::StudyConfig;
use crate::dicom::{DicomError, DicomImage};
use crate::service::{StudyService, SubmitRequest};
use crate::ServiceError;

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl ApiError {
    fn status_and_kind(&self) -> (StatusCode, &'static str) {
        use ServiceError::*;
        match &self.0 {
            UnknownStudy(_) => (StatusCode::NOT_FOUND, "unknown_study"),
            UnknownReader(_) => (StatusCode::NOT_FOUND, "unknown_reader"),
            UnknownImage(_) => (StatusCode::NOT_FOUND, "unknown_image"),
            NoPixelData(_) => (StatusCode::NOT_FOUND, "no_pixel_data"),
            DuplicateStudy(_) => (StatusCode::CONFLICT, "duplicate_study"),
            DuplicateSubmission { .. } => (StatusCode::CONFLICT, "duplicate_submission"),
            NoOpenIssuance { .. } => (StatusCode::CONFLICT, "no_open_issuance"),
            InvalidConfig(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_config"),
            SeverityOutOfRange(_) => (StatusCode::UNPROCESSABLE_ENTITY, "severity_out_of_range"),
            Report(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_probability"),
            ArmLocked { .. } => (StatusCode::LOCKED, "arm_locked"),
            ReportNotAvailable(_) => (StatusCode::FORBIDDEN, "report_not_available"),
            Dicom(DicomError::UnsupportedTransferSyntax(_)) => {
                (StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_transfer_syntax")
            }
            Dicom(_) => (StatusCode::INTERNAL_SERVER_ERROR, "dicom"),
            Corrupt(_) | Io(..) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = self.status_and_kind();
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        let mut body = json!({ "error": kind, "message": self.0.to_string() });
        if let ServiceError::ArmLocked { unlock_at } = &self.0 {
            body["unlock_at"] = json!(unlock_at);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking service work (journal fsyncs, DICOM reads) off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .expect("service task panicked")
        .map_err(ApiError)
}

fn parse_arm(s: &str) -> Result<Arm, Response> {
    Arm::from_str(s).map_err(|_| {
        (
            StatusCode::BAD_REQUEST,
            Json(json!({ "error": "bad_arm", "message": format!("arm must be `blind` or `assisted`, got `{s}`") })),
        )
            .into_response()
    })
}

async fn create_study(
    State(svc): State<Arc<StudyService>>,
    Json(config): Json<StudyConfig>,
) -> ApiResult<impl IntoResponse> {
    let summary = blocking(move || svc.create_study(config)).await?;
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn next_item(
    State(svc): State<Arc<StudyService>>,
    Path((study, reader, arm)): Path<(String, String, String)>,
) -> Response {
    let arm = match parse_arm(&arm) {
        Ok(a) => a,
        Err(r) => return r,
    };
    match blocking(move || svc.next_item(&study, &reader, arm)).await {
        Ok(item) => Json(item).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn submit(
    State(svc): State<Arc<StudyService>>,
    Path(study): Path<String>,
    Json(req): Json<SubmitRequest>,
) -> ApiResult<impl IntoResponse> {
    let event = blocking(move || svc.submit_reading(&study, &req)).await?;
    Ok((StatusCode::CREATED, Json(event)))
}

async fn export(State(svc): State<Arc<StudyService>>, Path(study): Path<String>) -> ApiResult<impl IntoResponse> {
    let csv = blocking(move || svc.export_events(&study)).await?;
    Ok((
        [(header::CONTENT_TYPE, "text/csv; charset=utf-8")],
        csv.as_str().to_owned(),
    ))
}

#[derive(Debug, Deserialize)]
struct PixelQuery {
    study: Option<String>,
}

#[derive(Debug, Serialize)]
struct PixelsResponse {
    image: String,
    /// Pixels are always delivered with MONOCHROME2 semantics.
    photometric: &'static str,
    #[serde(flatten)]
    data: DicomImage,
}

async fn pixels(
    State(svc): State<Arc<StudyService>>,
    Path(image): Path<String>,
    Query(q): Query<PixelQuery>,
) -> ApiResult<impl IntoResponse> {
    let id = image.clone();
    let data = blocking(move || svc.image_pixels(&id, q.study.as_deref())).await?;
    Ok(Json(PixelsResponse {
        image,
        photometric: "MONOCHROME2",
        data,
    }))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    study: String,
    reader: String,
}

async fn report(
    State(svc): State<Arc<StudyService>>,
    Path(image): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<impl IntoResponse> {
    let report = blocking(move || svc.image_report(&image, &q.study, &q.reader)).await?;
    Ok(Json(report))
}

pub fn router(service: Arc<StudyService>) -> Router {
    Router::new()
        .route("/studies", post(create_study))
        .route("/studies/{id}/readers/{reader}/arms/{arm}/next", get(next_item))
        .route("/studies/{id}/readings", post(submit))
        .route("/studies/{id}/export", get(export))
        .route("/images/{id}/pixels", get(pixels))
        .route("/images/{id}/report", get(report))
        .with_state(service)
}

/// Serves until the listener fails or `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    service: Arc<StudyService>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}
