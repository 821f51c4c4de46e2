use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::{json, Value};

use stopline_core::analytics::AnalyticsError;
use stopline_core::correspond::CorrespondError;
use stopline_core::homog::HomogError;
use stopline_core::ortho::OrthoError;
use stopline_core::pipeline::PipelineError;
use stopline_core::store::StoreError;
use stopline_core::tracks::TrackError;

/// Error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, "{}", self.message);
        }
        (self.status, Json(&self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::UnknownSite(id) => Self::not_found("site_not_found", msg).with_details(json!({ "site_id": id })),
            StoreError::SiteId(_) => Self::bad_request("invalid_site_id", msg),
            StoreError::Schema(_) => Self::bad_request("invalid_request", msg),
            StoreError::Range(_) => Self::bad_request("invalid_range", msg),
            StoreError::Conflict(keys) => Self::new(StatusCode::CONFLICT, "conflict", msg).with_details(json!({ "keys": keys })),
            StoreError::Locked(_) | StoreError::ReadOnly => Self::new(StatusCode::SERVICE_UNAVAILABLE, "store_unavailable", msg),
            StoreError::Corrupt { path, line, .. } => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "store_corrupt", msg).with_details(json!({ "path": path, "line": line }))
            }
            StoreError::Io(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "io_error", msg),
        }
    }
}

impl From<OrthoError> for ApiError {
    fn from(e: OrthoError) -> Self {
        let msg = e.to_string();
        match e {
            OrthoError::InvalidBBox(_) | OrthoError::InvalidSize(..) => Self::bad_request("invalid_bbox", msg),
            OrthoError::Transport(detail) => {
                Self::new(StatusCode::BAD_GATEWAY, "imagery_unreachable", msg).with_details(json!({ "transport": detail, "retryable": true }))
            }
            OrthoError::Service { status, .. } => {
                Self::new(StatusCode::BAD_GATEWAY, "imagery_service_error", msg).with_details(json!({ "upstream_status": status }))
            }
            OrthoError::Decode(_) => Self::new(StatusCode::BAD_GATEWAY, "imagery_decode_error", msg),
            OrthoError::Units { .. } | OrthoError::WorldFile(_) | OrthoError::InvalidGeoTransform(_) => Self::bad_request("invalid_georeference", msg),
            OrthoError::Io(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "io_error", msg),
        }
    }
}

impl From<CorrespondError> for ApiError {
    fn from(e: CorrespondError) -> Self {
        let msg = e.to_string();
        match e {
            CorrespondError::Validation(_) | CorrespondError::Parse(_) => Self::bad_request("invalid_pairs", msg),
            CorrespondError::Geometry(_) => Self::bad_request("invalid_annotations", msg),
            CorrespondError::SchemaVersion { found, expected } => {
                Self::bad_request("schema_version", msg).with_details(json!({ "found": found, "expected": expected }))
            }
            CorrespondError::Io(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "io_error", msg),
        }
    }
}

impl From<HomogError> for ApiError {
    fn from(e: HomogError) -> Self {
        let msg = e.to_string();
        match e {
            HomogError::TooFewPairs { needed, got } => Self::bad_request("too_few_pairs", msg).with_details(json!({ "needed": needed, "got": got })),
            HomogError::Params(_) => Self::bad_request("invalid_parameters", msg),
            HomogError::NoMatch { video } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "no_homography", msg).with_details(json!({ "video": video })),
            HomogError::NoConsensus {
                iterations,
                best_inliers,
                degenerate_samples,
            } => Self::new(StatusCode::CONFLICT, "estimation_failed", msg).with_details(json!({
                "iterations": iterations,
                "best_inliers": best_inliers,
                "degenerate_samples": degenerate_samples,
            })),
            HomogError::Degenerate(_) | HomogError::Singular { .. } | HomogError::Horizon { .. } => Self::new(StatusCode::CONFLICT, "estimation_failed", msg),
        }
    }
}

impl From<TrackError> for ApiError {
    fn from(e: TrackError) -> Self {
        let msg = e.to_string();
        match e {
            TrackError::Parse { line, message } => {
                Self::bad_request("parse_error", msg).with_details(json!({ "lines": [{ "line": line, "message": message }] }))
            }
            TrackError::Meta(_) => Self::bad_request("invalid_metadata", msg),
            TrackError::MixedVideos(videos) => Self::bad_request("mixed_videos", msg).with_details(json!({ "videos": videos })),
            TrackError::Param(_) => Self::bad_request("invalid_parameters", msg),
            TrackError::Rejected { .. } | TrackError::Geometry(..) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "geometry_error", msg),
        }
    }
}

impl From<AnalyticsError> for ApiError {
    fn from(e: AnalyticsError) -> Self {
        let msg = e.to_string();
        match e {
            AnalyticsError::UnknownProduct(_) => Self::not_found("unknown_product", msg),
            AnalyticsError::Empty => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "no_data", msg),
            AnalyticsError::Bins(_) | AnalyticsError::Window(_) => Self::bad_request("invalid_parameters", msg),
            AnalyticsError::Io(_) | AnalyticsError::Csv(_) => Self::internal(msg),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::Parse(lines) => Self::bad_request("parse_error", msg).with_details(json!({ "lines": lines })),
            PipelineError::Tracks(e) => e.into(),
            PipelineError::NoHomography(e) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "no_homography", e.to_string()),
            PipelineError::NoGeotransform(_) | PipelineError::NoAnnotations(_) => Self::new(StatusCode::CONFLICT, "site_incomplete", msg),
            PipelineError::VideoMismatch { expected, found } => {
                Self::bad_request("video_mismatch", msg).with_details(json!({ "expected": expected, "found": found }))
            }
            PipelineError::Config(_) => Self::internal(msg),
            PipelineError::Store(e) => e.into(),
            PipelineError::NoPairs(_) => Self::bad_request("too_few_pairs", msg).with_details(json!({ "needed": 4, "got": 0 })),
            PipelineError::Estimate(e) => e.into(),
            PipelineError::Report(e) => e.into(),
        }
    }
}
