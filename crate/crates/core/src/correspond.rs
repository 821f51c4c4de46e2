//! Camera/ortho point correspondences and site annotations.
//!
//! Sets are persisted as a versioned JSON document. Annotations live in
//! world metres so they stay valid when the homography is re-estimated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::{closest_on_segment, CameraPoint, OrthoPoint, WorldPoint};

pub const SCHEMA_VERSION: u32 = 1;
/// Minimal sample for a homography.
pub const MIN_PAIRS: usize = 4;
/// Below this many pairs the set is usable but flagged.
pub const RECOMMENDED_PAIRS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum CorrespondError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unsupported schema_version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("cannot parse correspondence file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondencePair {
    pub id: u32,
    pub cam: CameraPoint,
    pub ortho: OrthoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisSide {
    Left,
    Right,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: WorldPoint,
    pub b: WorldPoint,
}

impl Segment {
    pub fn new(a: WorldPoint, b: WorldPoint) -> Self {
        Self { a, b }
    }

    pub fn length(&self) -> f64 {
        self.a.distance(&self.b)
    }
}

/// Stop bar and median line, in world metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteAnnotations {
    pub stop_bar: Segment,
    pub median_line: Vec<WorldPoint>,
    #[serde(default)]
    pub analysis_side: AnalysisSide,
}

impl SiteAnnotations {
    pub fn validate(&self) -> Result<(), CorrespondError> {
        let pts = [self.stop_bar.a, self.stop_bar.b];
        if pts.iter().any(|p| !p.is_finite()) || self.median_line.iter().any(|p| !p.is_finite()) {
            return Err(CorrespondError::Validation("non-finite annotation coordinate".into()));
        }
        if self.stop_bar.a == self.stop_bar.b {
            return Err(CorrespondError::Validation("stop bar endpoints must be distinct".into()));
        }
        if self.median_line.len() < 2 {
            return Err(CorrespondError::Validation("median line needs at least 2 vertices".into()));
        }
        Ok(())
    }

    /// Which side of the median `pt` lies on, relative to the polyline's
    /// vertex order. Uses the segment nearest to `pt`; ties go to the
    /// earlier segment.
    pub fn side_of_median(&self, pt: WorldPoint) -> Result<Side, CorrespondError> {
        if self.median_line.len() < 2 {
            return Err(CorrespondError::Geometry("median line needs at least 2 vertices".into()));
        }
        let (a, b) = self
            .median_line
            .windows(2)
            .map(|w| (w[0], w[1]))
            .min_by(|(a1, b1), (a2, b2)| {
                let d1 = closest_on_segment(pt, *a1, *b1).1.distance(&pt);
                let d2 = closest_on_segment(pt, *a2, *b2).1.distance(&pt);
                d1.total_cmp(&d2)
            })
            .expect("at least one segment");
        if a == b {
            return Err(CorrespondError::Geometry("nearest median segment has zero length".into()));
        }
        let cross = (b.easting - a.easting) * (pt.northing - a.northing) - (b.northing - a.northing) * (pt.easting - a.easting);
        Ok(if cross.abs() < 1e-9 {
            Side::On
        } else if cross > 0.0 {
            Side::Left
        } else {
            Side::Right
        })
    }

    /// Whether a point on `side` belongs to the analysed direction.
    pub fn includes(&self, side: Side) -> bool {
        match self.analysis_side {
            AnalysisSide::Both => true,
            AnalysisSide::Left => side != Side::Right,
            AnalysisSide::Right => side != Side::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub schema_version: u32,
    pub site_id: String,
    pub camera_image_ref: String,
    pub ortho_ref: String,
    pub pairs: Vec<CorrespondencePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<SiteAnnotations>,
}

impl CorrespondenceSet {
    pub fn new(site_id: impl Into<String>, camera_image_ref: impl Into<String>, ortho_ref: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            site_id: site_id.into(),
            camera_image_ref: camera_image_ref.into(),
            ortho_ref: ortho_ref.into(),
            pairs: Vec::new(),
            annotations: None,
        }
    }

    /// Appends a pair with the next free id.
    pub fn add_pair(&mut self, cam: CameraPoint, ortho: OrthoPoint) -> Result<&CorrespondencePair, CorrespondError> {
        if !cam.is_finite() || !ortho.is_finite() {
            return Err(CorrespondError::Validation(format!(
                "non-finite coordinates: cam ({}, {}), ortho ({}, {})",
                cam.u, cam.v, ortho.x, ortho.y
            )));
        }
        let id = self.pairs.iter().map(|p| p.id).max().unwrap_or(0) + 1;
        self.pairs.push(CorrespondencePair { id, cam, ortho, label: None });
        Ok(self.pairs.last().expect("just pushed"))
    }

    pub fn validate(&self) -> Result<(), CorrespondError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CorrespondError::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let mut ids = std::collections::BTreeSet::new();
        for p in &self.pairs {
            if !ids.insert(p.id) {
                return Err(CorrespondError::Validation(format!("duplicate pair id {}", p.id)));
            }
            if !p.cam.is_finite() || !p.ortho.is_finite() {
                return Err(CorrespondError::Validation(format!("pair {} has non-finite coordinates", p.id)));
            }
        }
        if let Some(a) = &self.annotations {
            a.validate()?;
        }
        Ok(())
    }

    pub fn is_estimable(&self) -> bool {
        self.pairs.len() >= MIN_PAIRS
    }

    /// Human-readable notes about the set (not errors).
    pub fn warnings(&self) -> Vec<String> {
        let n = self.pairs.len();
        let mut out = Vec::new();
        if n < MIN_PAIRS {
            out.push(format!("{n} pairs; at least {MIN_PAIRS} are needed to estimate a homography"));
        } else if n < RECOMMENDED_PAIRS {
            out.push(format!("{n} pairs; {RECOMMENDED_PAIRS} to 20 well-spread pairs are recommended"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, CorrespondError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(CorrespondError::SchemaVersion {
                found,
                expected: SCHEMA_VERSION,
            });
        }
        let set: CorrespondenceSet = serde_json::from_value(raw)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorrespondError> {
        self.validate()?;
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorrespondError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
