use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveTime;
use rayon::prelude::*;
use serde_json::json;

use stopline_core::analytics::{emit_report, ReportFormat, PRODUCT_NAMES};
use stopline_core::config::AppConfig;
use stopline_core::correspond::{CorrespondenceSet, SiteAnnotations};
use stopline_core::homog::TimeWindow;
use stopline_core::ortho::{fetch_ortho as fetch, load_raster, sidecar_path, BoundingBoxGeo, HttpImagery, OrthoRaster};
use stopline_core::pipeline::{self, Registration};
use stopline_core::store::{SiteAsset, SiteRecord, Store, Table};
use stopline_core::time::Timestamp;
use stopline_core::tracks::VideoMeta;
use stopline_service::ApiError;

use crate::{AnnotateArgs, DetectArgs, EstimateArgs, ExportArgs, FetchOrthoArgs, IngestArgs, ReportArgs, ServeArgs};

pub type CmdResult = Result<(), ApiError>;

pub fn config_error(message: impl Into<String>) -> ApiError {
    ApiError::bad_request("invalid_config", message)
}

fn io_error(path: &Path, e: std::io::Error) -> ApiError {
    let status = if e.kind() == std::io::ErrorKind::NotFound { 404 } else { 500 };
    ApiError::new(status.try_into().expect("valid status"), "io_error", format!("{}: {e}", path.display())).with_details(json!({ "path": path }))
}

fn read_text(path: &Path) -> Result<String, ApiError> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn write_bytes(out: &mut dyn Write, bytes: &[u8]) -> CmdResult {
    out.write_all(bytes).map_err(|e| ApiError::internal(format!("cannot write output: {e}")))
}

/// One JSON document per line.
fn emit(out: &mut dyn Write, v: &impl serde::Serialize) -> CmdResult {
    let mut line = serde_json::to_vec(v).expect("output serialises");
    line.push(b'\n');
    write_bytes(out, &line)
}

pub fn load_config(path: Option<&Path>, store: Option<PathBuf>) -> Result<AppConfig, ApiError> {
    let mut config = AppConfig::load(path).map_err(|e| config_error(e.to_string()))?;
    if let Some(dir) = store {
        config.store_dir = dir;
    }
    Ok(config)
}

fn open(config: &AppConfig) -> Result<Store, ApiError> {
    Ok(Store::open(&config.store_dir)?)
}

fn open_read_only(config: &AppConfig) -> Result<Store, ApiError> {
    Ok(Store::open_read_only(&config.store_dir)?)
}

/// Loads the site, or a bare record when the store has none yet.
fn site_or_new(store: &Store, site_id: &str) -> Result<SiteRecord, ApiError> {
    stopline_core::store::validate_site_id(site_id)?;
    Ok(store.get_site(site_id).unwrap_or_else(|_| SiteRecord {
        site_id: site_id.to_string(),
        ..Default::default()
    }))
}

fn parse_size(s: &str) -> Result<(u32, u32), ApiError> {
    let bad = || ApiError::bad_request("invalid_bbox", format!("size '{s}' is not WIDTHxHEIGHT"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

/// `HH:MM-HH:MM` is a time-of-day window; two RFC 3339 instants joined by
/// `/` are an absolute range.
pub fn parse_window(s: &str) -> Result<TimeWindow, ApiError> {
    let bad = |m: String| ApiError::bad_request("invalid_window", format!("window '{s}': {m}"));
    if let Some((from, to)) = s.split_once('/') {
        let from = Timestamp::parse(from).map_err(|e| bad(e.to_string()))?;
        let to = Timestamp::parse(to).map_err(|e| bad(e.to_string()))?;
        return Ok(TimeWindow::Absolute { from, to });
    }
    let (from, to) = s.split_once('-').ok_or_else(|| bad("expected HH:MM-HH:MM or FROM/TO".into()))?;
    let tod = |t: &str| NaiveTime::parse_from_str(t.trim(), "%H:%M").map_err(|e| bad(e.to_string()));
    Ok(TimeWindow::TimeOfDay {
        from: tod(from)?,
        to: tod(to)?,
    })
}

pub fn fetch_ortho(config: &AppConfig, a: FetchOrthoArgs, out: &mut dyn Write) -> CmdResult {
    let raster: OrthoRaster = match (&a.image, &a.bbox) {
        (Some(path), _) => load_raster(path, &config.imagery.crs_id, config.imagery.crs_units)?,
        (None, Some(b)) => {
            let bbox = BoundingBoxGeo::new(b[0], b[1], b[2], b[3], config.imagery.crs_id.clone())?;
            if config.imagery.endpoint.is_empty() {
                return Err(ApiError::new(
                    502.try_into().expect("valid status"),
                    "imagery_unreachable",
                    "no imagery endpoint is configured",
                )
                .with_details(json!({ "transport": "not configured", "retryable": false })));
            }
            let size = a.size.as_deref().map(parse_size).transpose()?.unwrap_or(config.imagery.size);
            let source = HttpImagery::new(config.imagery.endpoint.clone(), config.imagery.timeout());
            let mut r = fetch(&source, &bbox, size)?;
            r.geotransform = r.geotransform.with_units(config.imagery.crs_units);
            r
        }
        (None, None) => return Err(ApiError::bad_request("invalid_bbox", "give --bbox or --image")),
    };
    let mut store = open(config)?;
    let mut site = site_or_new(&store, &a.site)?;
    if let Some(b) = &a.bbox {
        site.bbox = Some(BoundingBoxGeo::new(b[0], b[1], b[2], b[3], config.imagery.crs_id.clone())?);
    }
    store.put_site(&site)?;
    store.put_image(&a.site, SiteAsset::Ortho, &raster.pixels, Some(&raster.geotransform))?;
    if let Some(out) = &a.out {
        raster.save(out)?;
    }
    emit(
        out,
        &json!({
            "site_id": a.site,
            "width": raster.width(),
            "height": raster.height(),
            "geotransform": raster.geotransform,
            "source": raster.source_uri,
            "world_file": a.out.as_deref().map(sidecar_path),
        }),
    )?;
    Ok(())
}

pub fn annotate(config: &AppConfig, a: AnnotateArgs, out: &mut dyn Write) -> CmdResult {
    let ann: SiteAnnotations = serde_json::from_str(&read_text(&a.file)?).map_err(|e| ApiError::bad_request("invalid_json", e.to_string()))?;
    ann.validate()?;
    let mut store = open(config)?;
    let mut site = store.get_site(&a.site)?;
    site.annotations = Some(ann);
    store.put_site(&site)?;
    emit(out, &site.annotations)?;
    Ok(())
}

pub fn estimate(config: &AppConfig, a: EstimateArgs, out: &mut dyn Write) -> CmdResult {
    let pairs = a
        .pairs
        .as_deref()
        .map(|p| read_text(p).and_then(|t| Ok(CorrespondenceSet::from_json(&t)?)))
        .transpose()?;
    let site_id = match (&a.site, &pairs) {
        (Some(s), Some(p)) if *s != p.site_id => return Err(ApiError::bad_request("site_mismatch", format!("pairs belong to '{}', not '{s}'", p.site_id))),
        (Some(s), _) => s.clone(),
        (None, Some(p)) => p.site_id.clone(),
        (None, None) => return Err(ApiError::bad_request("invalid_request", "give --site or --pairs")),
    };
    let registration = Registration {
        window: a.window.as_deref().map(parse_window).transpose()?,
        filename_pattern: a.filename_pattern.clone(),
    };
    let mut params = config.robust.clone();
    if let Some(seed) = a.seed {
        params.seed = seed;
    }
    let mut store = open(config)?;
    if let Some(set) = &pairs {
        store.put_site(&site_or_new(&store, &site_id)?)?;
        store.put_pairs(set)?;
    }
    let created = Timestamp::from_datetime(&chrono::Utc::now().fixed_offset());
    let (result, record) = pipeline::estimate_site(&mut store, &site_id, &params, &registration, Some(created))?;
    // No timestamps here, so equal inputs print equal output.
    emit(
        out,
        &json!({
            "site_id": site_id,
            "seed": params.seed,
            "matrix": result.homography,
            "inlier_mask": result.inlier_mask,
            "inliers": result.inlier_count(),
            "mean_inlier_error": result.mean_inlier_error,
            "score": result.score,
            "iterations_run": result.iterations_run,
            "window": record.window,
            "filename_pattern": record.filename_pattern,
            "source_hash": record.source_hash,
        }),
    )?;
    Ok(())
}

pub fn ingest(config: &AppConfig, a: IngestArgs, out: &mut dyn Write) -> CmdResult {
    if a.detections.len() != a.meta.len() {
        return Err(ApiError::bad_request(
            "invalid_request",
            format!("{} --detections but {} --meta", a.detections.len(), a.meta.len()),
        ));
    }
    let inputs = a
        .detections
        .iter()
        .zip(&a.meta)
        .map(|(d, m)| Ok((read_text(d)?, VideoMeta::from_json(&read_text(m)?)?)))
        .collect::<Result<Vec<_>, ApiError>>()?;
    let mut store = open(config)?;
    let site = store.get_site(&a.site)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.parallel.max(1))
        .build()
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let cfg = &config.pipeline;
    // Indexed collect keeps input order whatever the thread count.
    let outputs = pool.install(|| {
        inputs
            .par_iter()
            .map(|(text, meta)| pipeline::ingest_video(&site, cfg, text, meta))
            .collect::<Result<Vec<_>, _>>()
    })?;
    for (output, (_, meta)) in outputs.iter().zip(&inputs) {
        store.replace_video(&a.site, &meta.video_id, &output.trajectories, &output.events)?;
        emit(out, &output.report)?;
    }
    Ok(())
}

pub fn detect(config: &AppConfig, a: DetectArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = config.pipeline.clone();
    if let Some(t) = a.a_trigger {
        cfg.thresholds.a_trigger = t;
    }
    let mut store = open(config)?;
    for report in pipeline::detect_site(&mut store, &a.site, &cfg, a.video.as_deref())? {
        emit(out, &report)?;
    }
    Ok(())
}

pub fn report(config: &AppConfig, a: ReportArgs, out: &mut dyn Write) -> CmdResult {
    let format: ReportFormat = a.format.parse().map_err(|e: String| ApiError::bad_request("invalid_format", e))?;
    let names: Vec<&str> = if a.product.is_empty() {
        PRODUCT_NAMES.to_vec()
    } else {
        a.product.iter().map(String::as_str).collect()
    };
    let store = open_read_only(config)?;
    let products = pipeline::site_products(&store, &a.site, &names, None)?;
    match &a.out {
        Some(dir) => {
            let paths = emit_report(&products, format, dir)?;
            emit(out, &json!({ "files": paths }))?;
        }
        None => {
            for p in &products {
                let mut body = p.render(format)?;
                if !body.ends_with('\n') {
                    body.push('\n');
                }
                write_bytes(out, body.as_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn export(config: &AppConfig, a: ExportArgs, out: &mut dyn Write) -> CmdResult {
    let table: Table = a.table.parse().map_err(|e: String| ApiError::not_found("unknown_table", e))?;
    let store = open_read_only(config)?;
    if let Some(site) = &a.site {
        store.get_site(site)?;
    }
    let (body, rows) = store.export_ndjson_string(table, a.site.as_deref())?;
    match &a.out {
        Some(path) => {
            std::fs::write(path, &body).map_err(|e| io_error(path, e))?;
            emit(out, &json!({ "table": a.table, "rows": rows, "path": path }))?;
        }
        None => write_bytes(out, body.as_bytes())?,
    }
    Ok(())
}

pub fn serve(mut config: AppConfig, a: ServeArgs) -> CmdResult {
    if let Some(listen) = a.listen {
        config.listen = listen;
    }
    if a.static_dir.is_some() {
        config.static_dir = a.static_dir;
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| ApiError::internal(e.to_string()))?;
    runtime.block_on(stopline_service::serve(config)).map_err(|e| match e {
        stopline_service::ServeError::Store(s) => s.into(),
        stopline_service::ServeError::Listen(_) => config_error(e.to_string()),
        stopline_service::ServeError::Io(_) => ApiError::internal(e.to_string()),
    })
}
