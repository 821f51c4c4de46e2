//! One video from detections to stored rows. The CLI and the HTTP service
//! both call [`ingest_video`], which is what keeps their outputs identical.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{build_product, AnalyticsError, DistanceBins, ObservedHours, Product, ReportInputs};
use crate::braking::{self, BrakingEvent, BrakingThresholds};
use crate::correspond::Side;
use crate::homog::{estimate_robust, select_homography, EstimateResult, HomogError, HomographyRecord, RobustParams, TimeWindow, VideoKey};
use crate::store::{EventQuery, SiteRecord, Store, StoreError, TrajectoryRow};
use crate::time::Timestamp;
use crate::tracks::{self, AssembleOptions, LineError, TrackError, VideoMeta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub ema_alpha: f64,
    pub min_track_len: usize,
    pub classes: Vec<String>,
    /// Kinematics grid step, s.
    pub dt: f64,
    /// Stationary clamp window (s) and radius (m); a zero window disables it.
    pub clamp_window: f64,
    pub clamp_radius: f64,
    /// Abort on the first malformed detection line set instead of skipping.
    pub strict: bool,
    pub thresholds: BrakingThresholds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ema_alpha: tracks::DEFAULT_EMA_ALPHA,
            min_track_len: tracks::DEFAULT_MIN_LEN,
            classes: tracks::DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            dt: braking::DEFAULT_DT,
            clamp_window: 1.0,
            clamp_radius: 0.5,
            strict: true,
            thresholds: BrakingThresholds::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("site '{0}' has no saved correspondences")]
    NoPairs(String),
    #[error(transparent)]
    Estimate(HomogError),
    #[error(transparent)]
    Report(AnalyticsError),
    #[error("{} malformed detection line(s), first at line {}", .0.len(), .0.first().map_or(0, |e| e.line))]
    Parse(Vec<LineError>),
    #[error(transparent)]
    Tracks(#[from] TrackError),
    #[error("no homography for video: {0}")]
    NoHomography(HomogError),
    #[error("site '{0}' has no geotransform; fetch or load an ortho first")]
    NoGeotransform(String),
    #[error("site '{0}' has no stop bar annotations")]
    NoAnnotations(String),
    #[error("detections belong to video '{found}' but the sidecar describes '{expected}'")]
    VideoMismatch { expected: String, found: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub site_id: String,
    pub video_id: String,
    pub detections: usize,
    pub parse_errors: Vec<LineError>,
    pub duplicates: usize,
    pub dropped_short: usize,
    pub dropped_class: usize,
    pub horizon_points: usize,
    pub rejected_tracks: usize,
    pub excluded_side: usize,
    pub skipped_kinematics: usize,
    pub clamped_points: usize,
    pub trajectories: usize,
    pub events: usize,
    pub rejected_candidates: usize,
    pub sub_mild: usize,
}

#[derive(Debug, Clone)]
pub struct IngestOutput {
    pub trajectories: Vec<TrajectoryRow>,
    pub events: Vec<BrakingEvent>,
    pub report: IngestReport,
}

struct TrackResult {
    row: Option<TrajectoryRow>,
    outcome: Option<braking::TrackOutcome>,
    horizon: usize,
    rejected: bool,
    excluded: bool,
    clamped: usize,
}

/// Runs tracks -> world -> braking for one video without touching the
/// store. Trajectories are processed in parallel; output order is by track
/// id regardless of scheduling.
pub fn ingest_video(site: &SiteRecord, cfg: &PipelineConfig, detections_text: &str, meta: &VideoMeta) -> Result<IngestOutput, PipelineError> {
    meta.validate()?;
    cfg.thresholds.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let gt = site.geotransform.as_ref().ok_or_else(|| PipelineError::NoGeotransform(site.site_id.clone()))?;
    let ann = site.annotations.as_ref().ok_or_else(|| PipelineError::NoAnnotations(site.site_id.clone()))?;
    let record = select_homography(
        &site.homographies,
        &VideoKey {
            video_id: &meta.video_id,
            filename: &meta.filename,
            start: meta.start_time,
        },
    )
    .map_err(PipelineError::NoHomography)?;

    let parsed = tracks::parse_detections(detections_text, false)?;
    if cfg.strict && !parsed.errors.is_empty() {
        return Err(PipelineError::Parse(parsed.errors));
    }
    if let Some(d) = parsed.detections.iter().find(|d| d.video_id != meta.video_id) {
        return Err(PipelineError::VideoMismatch {
            expected: meta.video_id.clone(),
            found: d.video_id.clone(),
        });
    }
    let opts = AssembleOptions {
        min_len: cfg.min_track_len,
        allowed_classes: cfg.classes.iter().cloned().collect::<BTreeSet<_>>(),
    };
    let assembled = tracks::assemble_tracks(&parsed.detections, &opts)?;
    let offset = meta.start_time.offset_seconds();
    let h = &record.matrix;

    let results: Vec<Result<TrackResult, PipelineError>> = assembled
        .tracks
        .par_iter()
        .map(|track| {
            let smoothed = track.smoothed(cfg.ema_alpha)?;
            let (mut traj, horizon) = match tracks::to_world(&smoothed, meta, h, gt, true) {
                Ok(v) => v,
                Err(TrackError::Rejected { dropped, .. }) => {
                    return Ok(TrackResult {
                        row: None,
                        outcome: None,
                        horizon: dropped,
                        rejected: true,
                        excluded: false,
                        clamped: 0,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let clamped = tracks::stationary_clamp(&mut traj, cfg.clamp_window, cfg.clamp_radius);
            let row = TrajectoryRow::from_trajectory(&site.site_id, &traj, offset)?;
            if !track_on_analysed_side(ann, &traj) {
                return Ok(TrackResult {
                    row: Some(row),
                    outcome: None,
                    horizon,
                    rejected: false,
                    excluded: true,
                    clamped,
                });
            }
            let outcome = braking::analyze_trajectory(&traj, &ann.stop_bar, &cfg.thresholds, cfg.dt, offset);
            Ok(TrackResult {
                row: Some(row),
                outcome: Some(outcome),
                horizon,
                rejected: false,
                excluded: false,
                clamped,
            })
        })
        .collect();

    let mut report = IngestReport {
        site_id: site.site_id.clone(),
        video_id: meta.video_id.clone(),
        detections: parsed.detections.len(),
        parse_errors: parsed.errors,
        duplicates: assembled.duplicates,
        dropped_short: assembled.dropped_short,
        dropped_class: assembled.dropped_class,
        ..Default::default()
    };
    let mut rows = Vec::new();
    let mut events = Vec::new();
    for r in results {
        let r = r?;
        report.horizon_points += r.horizon;
        report.rejected_tracks += r.rejected as usize;
        report.excluded_side += r.excluded as usize;
        report.clamped_points += r.clamped;
        if let Some(row) = r.row {
            rows.push(row);
        }
        if let Some(o) = r.outcome {
            report.skipped_kinematics += o.skipped.is_some() as usize;
            report.sub_mild += o.sub_mild();
            report.rejected_candidates += o.rejections.len() - o.sub_mild();
            events.extend(o.events);
        }
    }
    braking::sort_events(&mut events);
    report.trajectories = rows.len();
    report.events = events.len();
    Ok(IngestOutput {
        trajectories: rows,
        events,
        report,
    })
}

/// A track belongs to the analysed direction when most of its points lie on
/// an included side of the median.
fn track_on_analysed_side(ann: &crate::correspond::SiteAnnotations, traj: &tracks::Trajectory) -> bool {
    if ann.includes(Side::Left) && ann.includes(Side::Right) {
        return true;
    }
    let mut inside = 0usize;
    let mut total = 0usize;
    for p in &traj.points {
        if let Ok(side) = ann.side_of_median(p.world) {
            total += 1;
            inside += ann.includes(side) as usize;
        }
    }
    total > 0 && inside * 2 > total
}

/// Ingests and persists one video, replacing anything stored for it before.
pub fn ingest_into_store(
    store: &mut Store,
    site_id: &str,
    cfg: &PipelineConfig,
    detections_text: &str,
    meta: &VideoMeta,
) -> Result<IngestReport, PipelineError> {
    let site = store.get_site(site_id)?;
    let out = ingest_video(&site, cfg, detections_text, meta)?;
    store.replace_video(site_id, &meta.video_id, &out.trajectories, &out.events)?;
    Ok(out.report)
}

/// Braking re-run summary for one stored video.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub site_id: String,
    pub video_id: String,
    pub trajectories: usize,
    pub excluded_side: usize,
    pub skipped_kinematics: usize,
    pub events: usize,
    pub rejected_candidates: usize,
    pub sub_mild: usize,
}

/// Rebuilds a trajectory from its stored row. Camera and ortho pixels are
/// not persisted; braking only reads world positions, so they are filled
/// from the geotransform and left NaN respectively.
fn trajectory_from_row(row: &TrajectoryRow, gt: &crate::ortho::GeoTransform) -> tracks::Trajectory {
    let points = (0..row.points.t.len())
        .map(|i| {
            let world = crate::geom::WorldPoint::new(row.points.x[i], row.points.y[i]);
            tracks::TrackPoint {
                t: row.points.t[i],
                cam: crate::geom::CameraPoint::new(f64::NAN, f64::NAN),
                ortho: gt.world_to_pixel(world),
                world,
            }
        })
        .collect();
    tracks::Trajectory {
        track_id: row.track_id,
        video_id: row.video_id.clone(),
        class_label: row.class.clone(),
        points,
        smoothed: true,
    }
}

/// Re-runs braking detection over stored trajectories with the thresholds
/// in `cfg`, replacing each video's stored events. Trajectories are kept.
pub fn detect_site(store: &mut Store, site_id: &str, cfg: &PipelineConfig, video_id: Option<&str>) -> Result<Vec<DetectReport>, PipelineError> {
    cfg.thresholds.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let site = store.get_site(site_id)?;
    let gt = site.geotransform.as_ref().ok_or_else(|| PipelineError::NoGeotransform(site.site_id.clone()))?;
    let ann = site.annotations.as_ref().ok_or_else(|| PipelineError::NoAnnotations(site.site_id.clone()))?;
    let rows = store.query_trajectories(site_id, video_id);
    let videos: BTreeSet<String> = rows.iter().map(|r| r.video_id.clone()).collect();
    let mut reports = Vec::new();
    for video in videos {
        let video_rows: Vec<TrajectoryRow> = rows.iter().filter(|r| r.video_id == video).cloned().collect();
        let outcomes: Vec<Option<braking::TrackOutcome>> = video_rows
            .par_iter()
            .map(|row| {
                let traj = trajectory_from_row(row, gt);
                track_on_analysed_side(ann, &traj)
                    .then(|| braking::analyze_trajectory(&traj, &ann.stop_bar, &cfg.thresholds, cfg.dt, row.t_first.offset_seconds()))
            })
            .collect();
        let mut report = DetectReport {
            site_id: site_id.to_string(),
            video_id: video.clone(),
            trajectories: video_rows.len(),
            ..Default::default()
        };
        let mut events = Vec::new();
        for o in outcomes {
            let Some(o) = o else {
                report.excluded_side += 1;
                continue;
            };
            report.skipped_kinematics += o.skipped.is_some() as usize;
            report.sub_mild += o.sub_mild();
            report.rejected_candidates += o.rejections.len() - o.sub_mild();
            events.extend(o.events);
        }
        braking::sort_events(&mut events);
        report.events = events.len();
        store.replace_video(site_id, &video, &video_rows, &events)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Where a newly estimated homography applies. Both fields empty makes it
/// the site default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Registration {
    pub window: Option<TimeWindow>,
    pub filename_pattern: Option<String>,
}

/// Estimates a homography from the site's saved pairs and registers it.
/// A record with the same window and pattern is replaced, so re-running is
/// idempotent.
pub fn estimate_site(
    store: &mut Store,
    site_id: &str,
    params: &RobustParams,
    registration: &Registration,
    created_at: Option<Timestamp>,
) -> Result<(EstimateResult, HomographyRecord), PipelineError> {
    let mut site = store.get_site(site_id)?;
    let set = store.get_pairs(site_id)?.ok_or_else(|| PipelineError::NoPairs(site_id.to_string()))?;
    let result = estimate_robust(&set.pairs, params).map_err(PipelineError::Estimate)?;
    let record = HomographyRecord {
        site_id: site_id.to_string(),
        matrix: result.homography.clone(),
        window: registration.window.clone(),
        filename_pattern: registration.filename_pattern.clone(),
        created_at,
        source_hash: Some(hex::encode(Sha256::digest(set.to_json().as_bytes()))),
    };
    site.homographies
        .retain(|r| !(r.window == record.window && r.filename_pattern == record.filename_pattern));
    site.homographies.push(record.clone());
    store.put_site(&site)?;
    Ok((result, record))
}

/// Builds report products for one site from the stored events. Observed
/// hours default to the hours touched by stored trajectories.
pub fn site_products(store: &Store, site_id: &str, names: &[&str], observed: Option<ObservedHours>) -> Result<Vec<Product>, PipelineError> {
    let site = store.get_site(site_id)?;
    let events: Vec<BrakingEvent> = store.query_events(&EventQuery::site(site_id))?.into_iter().map(|r| r.event).collect();
    let observed = observed.unwrap_or_else(|| {
        let spans: Vec<_> = store.query_trajectories(site_id, None).iter().map(|t| (t.t_first, t.t_last)).collect();
        ObservedHours::from_spans(&spans)
    });
    let bins = DistanceBins::default();
    let inputs = ReportInputs {
        events: &events,
        observed: &observed,
        bins: &bins,
        geotransform: site.geotransform.as_ref(),
    };
    names.iter().map(|n| build_product(n, &inputs).map_err(PipelineError::Report)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspond::AnalysisSide;
    use crate::synthkit::{gen_approach, ApproachOptions, ApproachProfile, SynthScene};

    fn site(scene: &SynthScene) -> SiteRecord {
        SiteRecord {
            site_id: scene.site_id.clone(),
            bbox: None,
            geotransform: Some(scene.geotransform.clone()),
            annotations: Some(scene.annotations.clone()),
            homographies: vec![HomographyRecord::default_for(&scene.site_id, scene.homography.clone())],
        }
    }

    #[test]
    fn noise_free_braking_is_found() {
        let scene = SynthScene::standard();
        let a = gen_approach(&scene, &ApproachProfile::braking(15.0, 3.0, 40.0), &ApproachOptions::default()).unwrap();
        let out = ingest_video(&site(&scene), &PipelineConfig::default(), &a.detections_ndjson(), &a.meta).unwrap();
        assert_eq!(out.events.len(), 1, "{:?}", out.report);
        assert_eq!(out.events[0].severity, crate::braking::Severity::Moderate);
        assert_eq!(out.trajectories.len(), 1);
    }

    #[test]
    fn strict_parse_errors_list_lines() {
        let scene = SynthScene::standard();
        let a = gen_approach(&scene, &ApproachProfile::braking(15.0, 3.0, 40.0), &ApproachOptions::default()).unwrap();
        let mut text = a.detections_ndjson();
        text.insert_str(0, "{oops}\n");
        match ingest_video(&site(&scene), &PipelineConfig::default(), &text, &a.meta) {
            Err(PipelineError::Parse(errs)) => assert_eq!(errs[0].line, 1),
            other => panic!("{other:?}"),
        }
        let lenient = PipelineConfig {
            strict: false,
            ..PipelineConfig::default()
        };
        let out = ingest_video(&site(&scene), &lenient, &text, &a.meta).unwrap();
        assert_eq!(out.report.parse_errors.len(), 1);
    }

    #[test]
    fn missing_homography_window() {
        let scene = SynthScene::standard();
        let mut s = site(&scene);
        s.homographies[0].filename_pattern = Some("other-*.mp4".into());
        let a = gen_approach(&scene, &ApproachProfile::braking(15.0, 3.0, 40.0), &ApproachOptions::default()).unwrap();
        assert!(matches!(
            ingest_video(&s, &PipelineConfig::default(), &a.detections_ndjson(), &a.meta),
            Err(PipelineError::NoHomography(_))
        ));
    }

    #[test]
    fn opposite_side_tracks_are_not_analysed() {
        let scene = SynthScene::standard();
        let mut s = site(&scene);
        // The lane is left of the northbound median (x = 470 < 500).
        s.annotations.as_mut().unwrap().analysis_side = AnalysisSide::Right;
        let a = gen_approach(&scene, &ApproachProfile::braking(15.0, 3.0, 40.0), &ApproachOptions::default()).unwrap();
        let out = ingest_video(&s, &PipelineConfig::default(), &a.detections_ndjson(), &a.meta).unwrap();
        assert_eq!((out.report.excluded_side, out.events.len()), (1, 0));
    }

    #[test]
    fn estimate_site_registers_and_replaces() {
        let scene = SynthScene::standard();
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        store
            .put_site(&SiteRecord {
                site_id: "synth".into(),
                ..Default::default()
            })
            .unwrap();
        let params = RobustParams::default();
        assert!(matches!(
            estimate_site(&mut store, "synth", &params, &Registration::default(), None),
            Err(PipelineError::NoPairs(_))
        ));
        let mut set = crate::correspond::CorrespondenceSet::new("synth", "camera.png", "ortho.png");
        set.pairs = scene.correspondences(12, 0.0, 1);
        store.put_pairs(&set).unwrap();
        let (res, rec) = estimate_site(&mut store, "synth", &params, &Registration::default(), None).unwrap();
        assert_eq!(res.inlier_count(), 12);
        assert!(res.homography.max_abs_diff(&scene.homography) < 1e-6);
        assert_eq!(rec.source_hash.as_ref().map(String::len), Some(64));
        estimate_site(&mut store, "synth", &params, &Registration::default(), None).unwrap();
        let pattern = Registration {
            filename_pattern: Some("cam2-*.mp4".into()),
            ..Default::default()
        };
        estimate_site(&mut store, "synth", &params, &pattern, None).unwrap();
        assert_eq!(store.get_site("synth").unwrap().homographies.len(), 2);
    }

    #[test]
    fn detect_reproduces_ingest_and_follows_thresholds() {
        let scene = SynthScene::standard();
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        store.put_site(&site(&scene)).unwrap();
        let a = gen_approach(&scene, &ApproachProfile::braking(15.0, 3.0, 40.0), &ApproachOptions::default()).unwrap();
        let cfg = PipelineConfig::default();
        ingest_into_store(&mut store, &scene.site_id, &cfg, &a.detections_ndjson(), &a.meta).unwrap();
        let before = store.query_events(&EventQuery::site(&scene.site_id)).unwrap();
        assert_eq!(before.len(), 1);

        let reports = detect_site(&mut store, &scene.site_id, &cfg, None).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!((reports[0].trajectories, reports[0].events), (1, 1));
        assert_eq!(store.query_events(&EventQuery::site(&scene.site_id)).unwrap(), before);
        assert_eq!(store.query_trajectories(&scene.site_id, None).len(), 1);

        let mut strict = cfg.clone();
        strict.thresholds.a_trigger = 20.0;
        let reports = detect_site(&mut store, &scene.site_id, &strict, None).unwrap();
        assert_eq!(reports[0].events, 0);
        assert!(store.query_events(&EventQuery::site(&scene.site_id)).unwrap().is_empty());
        assert!(detect_site(&mut store, &scene.site_id, &cfg, Some("nope")).unwrap().is_empty());
    }
}
