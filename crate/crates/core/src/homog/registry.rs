//! Per-video homography selection. A camera can be nudged between videos,
//! so a site may carry several homographies keyed by time of day, absolute
//! validity range, and/or a filename pattern.

use chrono::NaiveTime;
use serde::{Deserialize, Serialize};

use super::{HomogError, Homography};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeWindow {
    /// Half-open local time-of-day window `[from, to)`; wraps past midnight
    /// when `from > to`.
    TimeOfDay { from: NaiveTime, to: NaiveTime },
    /// Half-open absolute range `[from, to)`.
    Absolute { from: Timestamp, to: Timestamp },
}

impl TimeWindow {
    pub fn contains(&self, t: &Timestamp) -> bool {
        match self {
            TimeWindow::TimeOfDay { from, to } => {
                let tod = t.to_datetime().time();
                if from <= to {
                    *from <= tod && tod < *to
                } else {
                    tod >= *from || tod < *to
                }
            }
            TimeWindow::Absolute { from, to } => from.micros() <= t.micros() && t.micros() < to.micros(),
        }
    }
}

/// A stored homography with its selection rules and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomographyRecord {
    pub site_id: String,
    pub matrix: Homography,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<TimeWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filename_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<Timestamp>,
    /// SHA-256 of the correspondence file the matrix was estimated from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_hash: Option<String>,
}

impl HomographyRecord {
    pub fn default_for(site_id: impl Into<String>, matrix: Homography) -> Self {
        Self {
            site_id: site_id.into(),
            matrix,
            window: None,
            filename_pattern: None,
            created_at: None,
            source_hash: None,
        }
    }

    fn specificity(&self) -> u8 {
        match (self.filename_pattern.is_some(), self.window.is_some()) {
            (true, true) => 3,
            (false, true) => 2,
            (true, false) => 1,
            (false, false) => 0,
        }
    }

    fn matches(&self, video: &VideoKey<'_>) -> bool {
        let time_ok = self.window.as_ref().is_none_or(|w| w.contains(&video.start));
        let name_ok = self
            .filename_pattern
            .as_ref()
            .is_none_or(|p| glob::Pattern::new(p).map(|p| p.matches(video.filename)).unwrap_or(false));
        time_ok && name_ok
    }
}

/// What selection needs to know about a video.
#[derive(Debug, Clone, Copy)]
pub struct VideoKey<'a> {
    pub video_id: &'a str,
    pub filename: &'a str,
    pub start: Timestamp,
}

/// Picks the most specific matching record; ties keep registry order.
pub fn select_homography<'r>(registry: &'r [HomographyRecord], video: &VideoKey<'_>) -> Result<&'r HomographyRecord, HomogError> {
    let mut ranked: Vec<(usize, &HomographyRecord)> = registry.iter().enumerate().collect();
    ranked.sort_by_key(|(i, r)| (std::cmp::Reverse(r.specificity()), *i));
    ranked
        .into_iter()
        .map(|(_, r)| r)
        .find(|r| r.matches(video))
        .ok_or_else(|| HomogError::NoMatch {
            video: video.video_id.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(hms: &str) -> Timestamp {
        Timestamp::parse(&format!("2025-02-13T{hms}-05:00")).unwrap()
    }

    fn registry() -> Vec<HomographyRecord> {
        let mut morning = HomographyRecord::default_for("s", Homography::translation(1.0, 0.0));
        morning.window = Some(TimeWindow::TimeOfDay {
            from: NaiveTime::from_hms_opt(7, 0, 0).unwrap(),
            to: NaiveTime::from_hms_opt(12, 0, 0).unwrap(),
        });
        vec![morning, HomographyRecord::default_for("s", Homography::identity())]
    }

    fn key(start: Timestamp) -> VideoKey<'static> {
        VideoKey {
            video_id: "v",
            filename: "cam_0900.mp4",
            start,
        }
    }

    #[test]
    fn default_only() {
        let reg = vec![HomographyRecord::default_for("s", Homography::identity())];
        assert_eq!(select_homography(&reg, &key(at("03:00:00"))).unwrap().matrix, Homography::identity());
    }

    #[test]
    fn window_containment() {
        let reg = registry();
        assert_eq!(select_homography(&reg, &key(at("09:00:00"))).unwrap().matrix, Homography::translation(1.0, 0.0));
        assert_eq!(select_homography(&reg, &key(at("13:00:00"))).unwrap().matrix, Homography::identity());
        assert_eq!(select_homography(&reg, &key(at("12:00:00"))).unwrap().matrix, Homography::identity());
    }

    #[test]
    fn no_default_is_an_error() {
        let reg = vec![registry().remove(0)];
        assert!(matches!(select_homography(&reg, &key(at("13:00:00"))), Err(HomogError::NoMatch { .. })));
    }

    #[test]
    fn pattern_and_time_beats_time_only() {
        let mut reg = registry();
        let mut specific = reg[0].clone();
        specific.matrix = Homography::translation(2.0, 0.0);
        specific.filename_pattern = Some("cam_09*.mp4".into());
        reg.push(specific);
        assert_eq!(select_homography(&reg, &key(at("09:00:00"))).unwrap().matrix, Homography::translation(2.0, 0.0));
        let other = VideoKey {
            filename: "north.mp4",
            ..key(at("09:00:00"))
        };
        assert_eq!(select_homography(&reg, &other).unwrap().matrix, Homography::translation(1.0, 0.0));
    }

    #[test]
    fn windows_wrap_midnight_and_absolute_ranges() {
        let night = TimeWindow::TimeOfDay {
            from: NaiveTime::from_hms_opt(22, 0, 0).unwrap(),
            to: NaiveTime::from_hms_opt(2, 0, 0).unwrap(),
        };
        assert!(night.contains(&at("23:30:00")));
        assert!(night.contains(&at("01:00:00")));
        assert!(!night.contains(&at("12:00:00")));
        let abs = TimeWindow::Absolute {
            from: at("08:00:00"),
            to: at("09:00:00"),
        };
        assert!(abs.contains(&at("08:59:59")));
        assert!(!abs.contains(&at("09:00:00")));
    }

    #[test]
    fn record_serde() {
        let r = &registry()[0];
        let json = serde_json::to_string(r).unwrap();
        assert!(json.contains("\"kind\":\"time_of_day\""));
        let back: HomographyRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, r);
    }
}
