use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use stopline_core::analytics::ReportFormat;
use stopline_core::braking::Severity;
use stopline_core::correspond::{CorrespondenceSet, SiteAnnotations, MIN_PAIRS};
use stopline_core::homog::{composite_overlay, select_homography, warp_image, HomographyRecord, RobustParams, VideoKey};
use stopline_core::ortho::{decode_rgb, fetch_ortho, BoundingBoxGeo, CrsUnits, GeoTransform};
use stopline_core::pipeline::{self, Registration};
use stopline_core::store::{EventQuery, SiteAsset, SiteRecord, Table};
use stopline_core::time::Timestamp;
use stopline_core::tracks::VideoMeta;

use crate::{ApiError, AppState};

type ApiResult<T> = Result<T, ApiError>;
type AppRef = State<Arc<AppState>>;

/// Runs blocking store or CPU work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request("invalid_json", e.to_string()).with_details(json!({ "line": e.line(), "column": e.column() })))
}

fn png_response(img: &RgbImage) -> ApiResult<Response> {
    let mut buf = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], buf).into_response())
}

pub async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub async fn list_sites(State(st): AppRef) -> ApiResult<Json<Vec<String>>> {
    blocking(move || Ok(Json(st.read(|s| s.list_sites())?))).await
}

#[derive(Debug, Deserialize)]
pub struct CreateSite {
    site_id: String,
    #[serde(default)]
    bbox: Option<BoundingBoxGeo>,
    /// Raster size to request, px; defaults to the configured size.
    #[serde(default)]
    size: Option<(u32, u32)>,
    /// Fetch imagery now. Defaults to true when a bbox is given and an
    /// imagery source is configured.
    #[serde(default)]
    fetch_ortho: Option<bool>,
    #[serde(default)]
    crs_units: Option<CrsUnits>,
}

#[derive(Debug, Serialize)]
struct SiteSummary {
    #[serde(flatten)]
    site: SiteRecord,
    has_pairs: bool,
    has_ortho: bool,
    has_camera_frame: bool,
}

pub async fn create_site(State(st): AppRef, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: CreateSite = parse_json(&body)?;
    blocking(move || {
        stopline_core::store::validate_site_id(&req.site_id)?;
        if let Some(b) = &req.bbox {
            b.validate()?;
        }
        if st.read(|s| s.get_site(&req.site_id)).is_ok() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "site_exists",
                format!("site '{}' already exists", req.site_id),
            ));
        }
        let want_fetch = req.fetch_ortho.unwrap_or(req.bbox.is_some() && st.imagery.is_some());
        let raster = match (&req.bbox, want_fetch) {
            (Some(bbox), true) => {
                let source = st.imagery.clone().ok_or_else(|| {
                    ApiError::new(StatusCode::BAD_GATEWAY, "imagery_unreachable", "no imagery endpoint is configured")
                        .with_details(json!({ "transport": "not configured", "retryable": false }))
                })?;
                let size = req.size.unwrap_or(st.config.imagery.size);
                let units = req.crs_units.unwrap_or(st.config.imagery.crs_units);
                let mut r = fetch_ortho(source.as_ref(), bbox, size)?;
                r.geotransform = r.geotransform.with_units(units);
                Some(r)
            }
            (None, true) => return Err(ApiError::bad_request("invalid_bbox", "fetch_ortho needs a bbox")),
            _ => None,
        };
        let record = SiteRecord {
            site_id: req.site_id.clone(),
            bbox: req.bbox.clone(),
            ..Default::default()
        };
        st.write(&req.site_id, |s| {
            s.put_site(&record)?;
            if let Some(r) = &raster {
                s.put_image(&record.site_id, SiteAsset::Ortho, &r.pixels, Some(&r.geotransform))?;
            }
            Ok::<_, ApiError>(())
        })?;
        Ok((
            StatusCode::CREATED,
            Json(json!({
                "site_id": record.site_id,
                "geotransform": raster.as_ref().map(|r| &r.geotransform),
                "ortho_source": raster.as_ref().map(|r| &r.source_uri),
            })),
        ))
    })
    .await
}

pub async fn get_site(State(st): AppRef, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        st.read(|s| {
            let site = s.get_site(&id)?;
            let summary = SiteSummary {
                has_pairs: s.get_pairs(&id)?.is_some(),
                has_ortho: s.site_dir(&id)?.join("ortho.png").exists(),
                has_camera_frame: s.site_dir(&id)?.join("camera.png").exists(),
                site,
            };
            Ok(Json(serde_json::to_value(summary).expect("summary serialises")))
        })
    })
    .await
}

pub async fn put_pairs(State(st): AppRef, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let set = CorrespondenceSet::from_json(std::str::from_utf8(&body).map_err(|e| ApiError::bad_request("invalid_json", e.to_string()))?)?;
    if set.site_id != id {
        return Err(ApiError::bad_request(
            "site_mismatch",
            format!("body is for site '{}' but the path names '{id}'", set.site_id),
        ));
    }
    blocking(move || {
        st.write(&id, |s| {
            s.get_site(&id)?;
            s.put_pairs(&set)
        })?;
        Ok(Json(json!({
            "site_id": id,
            "pairs": set.pairs.len(),
            "estimable": set.is_estimable(),
            "warnings": set.warnings(),
        })))
    })
    .await
}

pub async fn get_pairs(State(st): AppRef, Path(id): Path<String>) -> ApiResult<Json<CorrespondenceSet>> {
    blocking(move || {
        st.read(|s| {
            s.get_site(&id)?;
            s.get_pairs(&id)?
                .map(Json)
                .ok_or_else(|| ApiError::not_found("no_pairs", format!("site '{id}' has no saved pairs")))
        })
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct EstimateRequest {
    #[serde(flatten)]
    registration: Registration,
    seed: Option<u64>,
    params: Option<RobustParams>,
}

pub async fn estimate(State(st): AppRef, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: EstimateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        EstimateRequest::default()
    } else {
        parse_json(&body)?
    };
    blocking(move || {
        let mut params = req.params.unwrap_or_else(|| st.config.robust.clone());
        if let Some(seed) = req.seed {
            params.seed = seed;
        }
        let (result, record) = st.write(&id, |s| {
            let pairs = s.get_pairs(&id)?.map_or(0, |p| p.pairs.len());
            if pairs < MIN_PAIRS {
                s.get_site(&id)?;
                return Err(ApiError::bad_request("too_few_pairs", format!("need at least {MIN_PAIRS} pairs, have {pairs}"))
                    .with_details(json!({ "needed": MIN_PAIRS, "got": pairs })));
            }
            Ok(pipeline::estimate_site(s, &id, &params, &req.registration, Some(now()))?)
        })?;
        Ok(Json(json!({
            "matrix": result.homography,
            "inlier_mask": result.inlier_mask,
            "inliers": result.inlier_count(),
            "mean_inlier_error": result.mean_inlier_error,
            "score": result.score,
            "iterations_run": result.iterations_run,
            "seed": params.seed,
            "record": record,
        })))
    })
    .await
}

fn now() -> Timestamp {
    Timestamp::from_datetime(&chrono::Utc::now().fixed_offset())
}

#[derive(Debug, Deserialize)]
pub struct OverlayQuery {
    #[serde(default = "half")]
    alpha: f64,
    /// Picks the homography registered for this video file and start time;
    /// without them the most recently registered record is used.
    filename: Option<String>,
    t: Option<String>,
}

fn half() -> f64 {
    0.5
}

fn pick_record<'r>(records: &'r [HomographyRecord], q: &OverlayQuery) -> ApiResult<&'r HomographyRecord> {
    let no_h = || ApiError::not_found("no_homography", "no homography is registered for this site");
    match (&q.filename, &q.t) {
        (None, None) => records.last().ok_or_else(no_h),
        (filename, t) => {
            let start = match t {
                Some(t) => Timestamp::parse(t).map_err(|e| ApiError::bad_request("invalid_time", e.to_string()))?,
                None => now(),
            };
            let key = VideoKey {
                video_id: "",
                filename: filename.as_deref().unwrap_or(""),
                start,
            };
            select_homography(records, &key).map_err(|_| no_h())
        }
    }
}

pub async fn overlay(State(st): AppRef, Path(id): Path<String>, Query(q): Query<OverlayQuery>) -> ApiResult<Response> {
    if !(0.0..=1.0).contains(&q.alpha) {
        return Err(ApiError::bad_request("invalid_alpha", format!("alpha must be in [0, 1], got {}", q.alpha)));
    }
    blocking(move || {
        let (site, frame, ortho) =
            st.read(|s| Ok::<_, ApiError>((s.get_site(&id)?, s.get_image(&id, SiteAsset::CameraFrame)?, s.get_image(&id, SiteAsset::Ortho)?)))?;
        let record = pick_record(&site.homographies, &q)?;
        let ortho = ortho.ok_or_else(|| ApiError::not_found("no_ortho", "site has no orthoimage"))?;
        let frame = frame.ok_or_else(|| ApiError::not_found("no_camera_frame", "site has no camera frame"))?;
        let warped = warp_image(&record.matrix, &frame, ortho.dimensions())?;
        png_response(&composite_overlay(&ortho, &warped, q.alpha))
    })
    .await
}

pub async fn put_annotations(State(st): AppRef, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<SiteAnnotations>> {
    let ann: SiteAnnotations = parse_json(&body)?;
    ann.validate()?;
    blocking(move || {
        st.write(&id, |s| {
            let mut site = s.get_site(&id)?;
            site.annotations = Some(ann.clone());
            s.put_site(&site)
        })?;
        Ok(Json(ann))
    })
    .await
}

pub async fn get_annotations(State(st): AppRef, Path(id): Path<String>) -> ApiResult<Json<SiteAnnotations>> {
    blocking(move || {
        st.read(|s| s.get_site(&id))?
            .annotations
            .map(Json)
            .ok_or_else(|| ApiError::not_found("no_annotations", "site has no annotations"))
    })
    .await
}

pub async fn put_camera_frame(State(st): AppRef, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    blocking(move || {
        let img = decode_rgb(&body).map_err(|e| ApiError::bad_request("invalid_image", e.to_string()))?;
        st.write(&id, |s| s.put_image(&id, SiteAsset::CameraFrame, &img, None))?;
        Ok(Json(json!({ "width": img.width(), "height": img.height() })))
    })
    .await
}

pub async fn get_camera_frame(State(st): AppRef, Path(id): Path<String>) -> ApiResult<Response> {
    get_asset(st, id, SiteAsset::CameraFrame).await
}

pub async fn get_ortho(State(st): AppRef, Path(id): Path<String>) -> ApiResult<Response> {
    get_asset(st, id, SiteAsset::Ortho).await
}

async fn get_asset(st: Arc<AppState>, id: String, asset: SiteAsset) -> ApiResult<Response> {
    blocking(move || {
        let img = st.read(|s| {
            s.get_site(&id)?;
            s.get_image(&id, asset)
        })?;
        let img = img.ok_or_else(|| ApiError::not_found("no_image", format!("site '{id}' has no such image")))?;
        png_response(&img)
    })
    .await
}

/// Reads every multipart field into memory, keyed by field name.
async fn read_multipart(mut mp: Multipart) -> ApiResult<std::collections::BTreeMap<String, Bytes>> {
    let mut out = std::collections::BTreeMap::new();
    while let Some(field) = mp.next_field().await.map_err(|e| ApiError::bad_request("invalid_multipart", e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| ApiError::bad_request("invalid_multipart", e.to_string()))?;
        out.insert(name, data);
    }
    Ok(out)
}

fn required<'a>(parts: &'a std::collections::BTreeMap<String, Bytes>, name: &str) -> ApiResult<&'a Bytes> {
    parts
        .get(name)
        .ok_or_else(|| ApiError::bad_request("missing_field", format!("multipart field '{name}' is required")))
}

fn utf8<'a>(b: &'a Bytes, name: &str) -> ApiResult<&'a str> {
    std::str::from_utf8(b).map_err(|e| ApiError::bad_request("invalid_encoding", format!("field '{name}': {e}")))
}

/// Multipart fields: `image` (PNG/TIFF), `worldfile` (six lines) and
/// optionally `crs_id` and `crs_units`.
pub async fn put_ortho(State(st): AppRef, Path(id): Path<String>, mp: Multipart) -> ApiResult<Json<GeoTransform>> {
    let parts = read_multipart(mp).await?;
    blocking(move || {
        let img = decode_rgb(required(&parts, "image")?).map_err(|e| ApiError::bad_request("invalid_image", e.to_string()))?;
        let world = utf8(required(&parts, "worldfile")?, "worldfile")?;
        let crs_id = match parts.get("crs_id") {
            Some(b) => utf8(b, "crs_id")?.trim().to_string(),
            None => st.config.imagery.crs_id.clone(),
        };
        let units = match parts.get("crs_units") {
            Some(b) => serde_json::from_value(Value::String(utf8(b, "crs_units")?.trim().to_string()))
                .map_err(|_| ApiError::bad_request("invalid_georeference", "crs_units must be meters, feet or degrees"))?,
            None => st.config.imagery.crs_units,
        };
        let gt = GeoTransform::from_world_file(world, crs_id, units)?;
        st.write(&id, |s| s.put_image(&id, SiteAsset::Ortho, &img, Some(&gt)))?;
        Ok(Json(gt))
    })
    .await
}

/// Multipart fields: `detections` (NDJSON) and `meta` (video sidecar JSON).
pub async fn ingest(State(st): AppRef, Path(id): Path<String>, mp: Multipart) -> ApiResult<Json<pipeline::IngestReport>> {
    let parts = read_multipart(mp).await?;
    blocking(move || {
        let detections = utf8(required(&parts, "detections")?, "detections")?;
        let meta = VideoMeta::from_json(utf8(required(&parts, "meta")?, "meta")?)?;
        let cfg = st.config.pipeline.clone();
        let report = st.write(&id, |s| pipeline::ingest_into_store(s, &id, &cfg, detections, &meta))?;
        Ok(Json(report))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct TrackQuery {
    video_id: Option<String>,
}

pub async fn tracks(State(st): AppRef, Path(id): Path<String>, Query(q): Query<TrackQuery>) -> ApiResult<Json<Value>> {
    blocking(move || {
        st.read(|s| {
            s.get_site(&id)?;
            let rows = s.query_trajectories(&id, q.video_id.as_deref());
            Ok(Json(serde_json::to_value(rows).expect("rows serialise")))
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    severity: Option<String>,
    from: Option<String>,
    to: Option<String>,
    video_id: Option<String>,
}

pub async fn events(State(st): AppRef, Path(id): Path<String>, Query(q): Query<EventsQuery>) -> ApiResult<Json<Value>> {
    let time = |s: &Option<String>| -> ApiResult<Option<Timestamp>> {
        s.as_deref()
            .map(|t| Timestamp::parse(t).map_err(|e| ApiError::bad_request("invalid_time", e.to_string())))
            .transpose()
    };
    let query = EventQuery {
        site_id: id.clone(),
        t_from: time(&q.from)?,
        t_to: time(&q.to)?,
        severity: q
            .severity
            .as_deref()
            .map(|s| s.parse::<Severity>().map_err(|e| ApiError::bad_request("invalid_severity", e.to_string())))
            .transpose()?,
        video_id: q.video_id,
    };
    blocking(move || {
        st.read(|s| {
            s.get_site(&id)?;
            let rows = s.query_events(&query)?;
            Ok(Json(serde_json::to_value(rows).expect("rows serialise")))
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct ReportQuery {
    format: Option<String>,
}

pub async fn report(State(st): AppRef, Path((id, product)): Path<(String, String)>, Query(q): Query<ReportQuery>) -> ApiResult<Response> {
    let format = match q.format.as_deref() {
        None => ReportFormat::Json,
        Some(f) => f.parse::<ReportFormat>().map_err(|e| ApiError::bad_request("invalid_format", e))?,
    };
    blocking(move || {
        let products = st.read(|s| pipeline::site_products(s, &id, &[product.as_str()], None))?;
        let body = products[0].render(format)?;
        let content_type = match format {
            ReportFormat::Json => "application/json",
            ReportFormat::Csv => "text/csv",
        };
        Ok(([(header::CONTENT_TYPE, content_type)], body).into_response())
    })
    .await
}

pub async fn export(State(st): AppRef, Path((id, table)): Path<(String, String)>) -> ApiResult<Response> {
    let table: Table = table.parse().map_err(|e: String| ApiError::not_found("unknown_table", e))?;
    blocking(move || {
        let (body, _) = st.read(|s| {
            s.get_site(&id)?;
            s.export_ndjson_string(table, Some(&id))
        })?;
        Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
    })
    .await
}
