//! Detection ingestion and trajectory assembly.
//!
//! Detections arrive as NDJSON from an upstream detector/tracker. Each track
//! is reduced to its ground point (bbox bottom-centre), smoothed in camera
//! space, anchored to wall-clock time and projected to world metres.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geom::{CameraPoint, OrthoPoint, WorldPoint};
use crate::homog::Homography;
use crate::ortho::GeoTransform;
use crate::time::Timestamp;

pub const DEFAULT_MIN_LEN: usize = 10;
pub const DEFAULT_EMA_ALPHA: f64 = 0.3;
pub const DEFAULT_CLASSES: [&str; 4] = ["car", "truck", "bus", "motorcycle"];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrackError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("detections span several videos: {0:?}")]
    MixedVideos(Vec<String>),
    #[error("invalid video metadata: {0}")]
    Meta(String),
    #[error("track {track_id}: {dropped} of {total} points hit the horizon")]
    Rejected { track_id: i64, dropped: usize, total: usize },
    #[error("track {track_id}: {0}", track_id = .1)]
    Geometry(String, i64),
}

/// One detector output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    #[serde(rename = "frame")]
    pub frame_idx: u64,
    pub track_id: i64,
    #[serde(rename = "class")]
    pub class_label: String,
    /// `[x, y, w, h]`, top-left origin, px.
    pub bbox: [f64; 4],
    #[serde(rename = "conf")]
    pub confidence: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<(), String> {
        let [x, y, w, h] = self.bbox;
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err("bbox has non-finite values".into());
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(format!("bbox width and height must be positive, got {w} x {h}"));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        Ok(())
    }

    /// Wheel-contact point: bottom-centre of the box.
    pub fn ground_point(&self) -> CameraPoint {
        let [x, y, w, h] = self.bbox;
        CameraPoint::new(x + w / 2.0, y + h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedDetections {
    pub detections: Vec<Detection>,
    pub errors: Vec<LineError>,
}

/// Parses NDJSON detections. Blank lines are skipped; in lenient mode bad
/// lines are collected (1-based line numbers) and parsing continues.
pub fn parse_detections(text: &str, strict: bool) -> Result<ParsedDetections, TrackError> {
    let mut out = ParsedDetections::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Detection>(line)
            .map_err(|e| e.to_string())
            .and_then(|d| d.validate().map(|_| d));
        match parsed {
            Ok(d) => out.detections.push(d),
            Err(message) if strict => return Err(TrackError::Parse { line: line_no, message }),
            Err(message) => out.errors.push(LineError { line: line_no, message }),
        }
    }
    Ok(out)
}

/// Video sidecar: when and how fast the video was recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub start_time: Timestamp,
    pub fps: f64,
    pub filename: String,
}

impl VideoMeta {
    pub fn from_json(text: &str) -> Result<Self, TrackError> {
        let meta: VideoMeta = serde_json::from_str(text).map_err(|e| TrackError::Meta(e.to_string()))?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<(), TrackError> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(TrackError::Meta(format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }

    /// Absolute time of a frame, epoch seconds.
    pub fn frame_time(&self, frame_idx: u64) -> f64 {
        self.start_time.epoch_seconds() + frame_idx as f64 / self.fps
    }
}

pub fn anchor_timestamps(frames: &[u64], meta: &VideoMeta) -> Vec<f64> {
    frames.iter().map(|f| meta.frame_time(*f)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraSample {
    pub frame_idx: u64,
    pub cam: CameraPoint,
}

/// A track in camera space, frame-ordered, one sample per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrack {
    pub track_id: i64,
    pub video_id: String,
    pub class_label: String,
    pub samples: Vec<CameraSample>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssembleReport {
    pub tracks: Vec<CameraTrack>,
    pub dropped_short: usize,
    pub dropped_class: usize,
    /// Detections discarded by those track drops.
    pub dropped_points: usize,
    pub duplicates: usize,
}

#[derive(Debug, Clone)]
pub struct AssembleOptions {
    pub min_len: usize,
    pub allowed_classes: BTreeSet<String>,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self {
            min_len: DEFAULT_MIN_LEN,
            allowed_classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Groups detections by track id. Duplicate frames keep the most confident
/// box (first seen on ties). A track's class is its most frequent label.
pub fn assemble_tracks(detections: &[Detection], opts: &AssembleOptions) -> Result<AssembleReport, TrackError> {
    let videos: BTreeSet<&str> = detections.iter().map(|d| d.video_id.as_str()).collect();
    if videos.len() > 1 {
        return Err(TrackError::MixedVideos(videos.into_iter().map(String::from).collect()));
    }
    let mut groups: BTreeMap<i64, BTreeMap<u64, &Detection>> = BTreeMap::new();
    let mut report = AssembleReport::default();
    for d in detections {
        let frames = groups.entry(d.track_id).or_default();
        match frames.get(&d.frame_idx) {
            Some(prev) => {
                report.duplicates += 1;
                tracing::warn!(track_id = d.track_id, frame = d.frame_idx, "duplicate detection, keeping higher confidence");
                if d.confidence > prev.confidence {
                    frames.insert(d.frame_idx, d);
                }
            }
            None => {
                frames.insert(d.frame_idx, d);
            }
        }
    }
    for (track_id, frames) in groups {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in frames.values() {
            *counts.entry(d.class_label.as_str()).or_default() += 1;
        }
        let class = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(c, _)| c.to_string())
            .unwrap_or_default();
        if !opts.allowed_classes.contains(&class) {
            report.dropped_class += 1;
            report.dropped_points += frames.len();
            continue;
        }
        if frames.len() < opts.min_len {
            report.dropped_short += 1;
            report.dropped_points += frames.len();
            continue;
        }
        let video_id = frames.values().next().map(|d| d.video_id.clone()).unwrap_or_default();
        report.tracks.push(CameraTrack {
            track_id,
            video_id,
            class_label: class,
            samples: frames
                .iter()
                .map(|(f, d)| CameraSample {
                    frame_idx: *f,
                    cam: d.ground_point(),
                })
                .collect(),
        });
    }
    Ok(report)
}

/// Exponential moving average `s0 = v0`, `sk = a vk + (1 - a) s(k-1)`.
/// Timestamps pass through unchanged.
pub fn ema_smooth(series: &[(f64, f64)], alpha: f64) -> Result<Vec<(f64, f64)>, TrackError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(TrackError::Param(format!("EMA alpha must lie in (0, 1], got {alpha}")));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut state: Option<f64> = None;
    for &(t, v) in series {
        let s = match state {
            None => v,
            Some(prev) => alpha * v + (1.0 - alpha) * prev,
        };
        state = Some(s);
        out.push((t, s));
    }
    Ok(out)
}

impl CameraTrack {
    /// EMA over `u` and `v` independently.
    pub fn smoothed(&self, alpha: f64) -> Result<CameraTrack, TrackError> {
        let us: Vec<(f64, f64)> = self.samples.iter().map(|s| (s.frame_idx as f64, s.cam.u)).collect();
        let vs: Vec<(f64, f64)> = self.samples.iter().map(|s| (s.frame_idx as f64, s.cam.v)).collect();
        let us = ema_smooth(&us, alpha)?;
        let vs = ema_smooth(&vs, alpha)?;
        let samples = self
            .samples
            .iter()
            .zip(us.iter().zip(vs.iter()))
            .map(|(s, (u, v))| CameraSample {
                frame_idx: s.frame_idx,
                cam: CameraPoint::new(u.1, v.1),
            })
            .collect();
        Ok(CameraTrack { samples, ..self.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    /// Epoch seconds.
    pub t: f64,
    pub cam: CameraPoint,
    pub ortho: OrthoPoint,
    pub world: WorldPoint,
}

/// A vehicle trajectory. Carries positions only; no imagery or identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub track_id: i64,
    pub video_id: String,
    pub class_label: String,
    pub points: Vec<TrackPoint>,
    pub smoothed: bool,
}

impl Trajectory {
    pub fn world_points(&self) -> impl Iterator<Item = (f64, WorldPoint)> + '_ {
        self.points.iter().map(|p| (p.t, p.world))
    }
}

/// Projects a camera track to ortho pixels and world metres. Horizon hits
/// are dropped and counted; losing more than half the points rejects the
/// track.
pub fn to_world(track: &CameraTrack, meta: &VideoMeta, h: &Homography, gt: &GeoTransform, smoothed: bool) -> Result<(Trajectory, usize), TrackError> {
    let k = gt.metres_per_unit().map_err(|e| TrackError::Geometry(e.to_string(), track.track_id))?;
    let total = track.samples.len();
    let mut points = Vec::with_capacity(total);
    for s in &track.samples {
        let Ok(ortho) = h.project(s.cam) else { continue };
        let w = gt.pixel_to_world(ortho);
        points.push(TrackPoint {
            t: meta.frame_time(s.frame_idx),
            cam: s.cam,
            ortho,
            world: WorldPoint::new(w.easting * k, w.northing * k),
        });
    }
    let dropped = total - points.len();
    if dropped * 2 > total || points.is_empty() {
        return Err(TrackError::Rejected {
            track_id: track.track_id,
            dropped,
            total,
        });
    }
    Ok((
        Trajectory {
            track_id: track.track_id,
            video_id: track.video_id.clone(),
            class_label: track.class_label.clone(),
            points,
            smoothed,
        },
        dropped,
    ))
}

/// Snaps parked stretches onto a single anchor. Starting at each point, if
/// every point within the next `window` seconds stays within `radius` of it,
/// those points (and any following ones still inside the radius) are moved
/// onto the anchor. Returns the number of points moved.
pub fn stationary_clamp(traj: &mut Trajectory, window: f64, radius: f64) -> usize {
    if window <= 0.0 || radius <= 0.0 {
        return 0;
    }
    let n = traj.points.len();
    let mut clamped = 0;
    let mut i = 0;
    while i < n {
        let anchor = traj.points[i].clone();
        let t0 = anchor.t;
        let mut j = i;
        while j + 1 < n && traj.points[j + 1].t - t0 <= window + 1e-9 {
            j += 1;
        }
        let covers_window = traj.points[j].t - t0 >= window - 1e-9;
        let still = (i..=j).all(|k| traj.points[k].world.distance(&anchor.world) <= radius);
        if j > i && covers_window && still {
            let mut end = j;
            while end + 1 < n && traj.points[end + 1].world.distance(&anchor.world) <= radius {
                end += 1;
            }
            for p in &mut traj.points[i + 1..=end] {
                if p.world != anchor.world {
                    clamped += 1;
                }
                p.world = anchor.world;
                p.ortho = anchor.ortho;
            }
            i = end + 1;
        } else {
            i += 1;
        }
    }
    clamped
}
