//! Stop-bar kinematics and braking-event detection.
//!
//! Everything here works in approach coordinates: `r` is the distance to the
//! stop bar, `v = -dr/dt` is positive while approaching and braking shows up
//! as `a = dv/dt < 0`. All thresholds are magnitudes.

use serde::{Deserialize, Serialize};

use crate::correspond::Segment;
use crate::geom::{closest_on_segment, WorldPoint};
use crate::stats;
use crate::time::Timestamp;
use crate::tracks::Trajectory;

pub const DEFAULT_DT: f64 = 0.1;
pub const STANDARD_GRAVITY: f64 = 9.81;

/// Candidate ranges whose interruption spans less than this are merged.
pub const MERGE_GAP: f64 = 0.1;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BrakingError {
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
    #[error("empty acceleration window")]
    EmptyWindow,
    #[error("invalid kinematic series: {0}")]
    Series(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrakingThresholds {
    /// m/s^2
    pub a_trigger: f64,
    pub robust_fraction: f64,
    /// Percent, e.g. 5 for the 5th percentile.
    pub robust_percentile: f64,
    /// s
    pub min_duration: f64,
    pub g: f64,
    /// Band edges as fractions of `g`.
    pub mild_lo_g: f64,
    pub moderate_lo_g: f64,
    pub severe_lo_g: f64,
}

impl Default for BrakingThresholds {
    fn default() -> Self {
        Self {
            a_trigger: 0.25,
            robust_fraction: 0.85,
            robust_percentile: 5.0,
            min_duration: 0.2,
            g: STANDARD_GRAVITY,
            mild_lo_g: 0.15,
            moderate_lo_g: 0.25,
            severe_lo_g: 0.40,
        }
    }
}

impl BrakingThresholds {
    pub fn mild_lo(&self) -> f64 {
        self.mild_lo_g * self.g
    }

    pub fn moderate_lo(&self) -> f64 {
        self.moderate_lo_g * self.g
    }

    pub fn severe_lo(&self) -> f64 {
        self.severe_lo_g * self.g
    }

    pub fn robust_gate(&self) -> f64 {
        self.robust_fraction * self.a_trigger
    }

    pub fn validate(&self) -> Result<(), BrakingError> {
        let bad = |m: &str| Err(BrakingError::Thresholds(m.to_string()));
        if !(self.a_trigger > 0.0) {
            return bad("a_trigger must be positive");
        }
        if !(self.min_duration > 0.0) {
            return bad("min_duration must be positive");
        }
        if !(self.g > 0.0) {
            return bad("g must be positive");
        }
        if !(0.0 < self.robust_fraction) {
            return bad("robust_fraction must be positive");
        }
        if !(0.0..=100.0).contains(&self.robust_percentile) {
            return bad("robust_percentile must lie in [0, 100]");
        }
        if !(0.0 < self.mild_lo() && self.mild_lo() < self.moderate_lo() && self.moderate_lo() < self.severe_lo()) {
            return bad("severity bands must satisfy 0 < mild < moderate < severe");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];

    pub fn as_str(&self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }
}

impl std::fmt::Display for Severity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mild" => Ok(Severity::Mild),
            "moderate" => Ok(Severity::Moderate),
            "severe" => Ok(Severity::Severe),
            other => Err(format!("unknown severity '{other}'")),
        }
    }
}

// Band edges are products like 0.40 * 9.81, which land an ulp above the
// decimal value (3.9240000000000004). Comparisons allow that much slack so
// the closed lower edges hold for the decimal constants.
const EDGE_REL_EPS: f64 = 1e-12;

fn at_or_above(a: f64, edge: f64) -> bool {
    a >= edge - edge.abs() * EDGE_REL_EPS
}

/// Band lookup with closed lower edges. `None` means below the mild band.
pub fn classify_severity(a_bar: f64, th: &BrakingThresholds) -> Option<Severity> {
    if at_or_above(a_bar, th.severe_lo()) {
        Some(Severity::Severe)
    } else if at_or_above(a_bar, th.moderate_lo()) {
        Some(Severity::Moderate)
    } else if at_or_above(a_bar, th.mild_lo()) {
        Some(Severity::Mild)
    } else {
        None
    }
}

/// Distance from `p` to the nearest point of the stop-bar segment.
pub fn radial_distance(p: WorldPoint, stop_bar: &Segment) -> f64 {
    closest_on_segment(p, stop_bar.a, stop_bar.b).1.distance(&p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicSeries {
    /// Epoch seconds.
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    /// Resampled world position at each `t`.
    pub pos: Vec<WorldPoint>,
}

impl KinematicSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self) -> Result<(), BrakingError> {
        let n = self.t.len();
        if [self.r.len(), self.v.len(), self.a.len(), self.pos.len()].iter().any(|&l| l != n) {
            return Err(BrakingError::Series("field lengths differ".into()));
        }
        if self.t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(BrakingError::Series("time is not strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SkipReason {
    TooFewPoints { points: usize },
    TooShort { span: f64 },
    NonMonotonicTime,
}

/// Derivative by central differences with second-order one-sided stencils at
/// both ends. Exact for quadratics. Needs at least three samples.
fn derivative(f: &[f64], dt: f64) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        d[i] = (f[i + 1] - f[i - 1]) / (2.0 * dt);
    }
    d[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * dt);
    d[n - 1] = (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * dt);
    d
}

/// Radial distance, approach speed and approach acceleration on a uniform
/// grid of step `dt` starting at the first sample.
pub fn kinematics(traj: &Trajectory, stop_bar: &Segment, dt: f64) -> Result<KinematicSeries, SkipReason> {
    let pts = &traj.points;
    if pts.len() < 5 {
        return Err(SkipReason::TooFewPoints { points: pts.len() });
    }
    if pts.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(SkipReason::NonMonotonicTime);
    }
    // Work in time relative to the first sample so the grid is not at the
    // mercy of epoch-second rounding.
    let t0 = pts[0].t;
    let rel: Vec<f64> = pts.iter().map(|p| p.t - t0).collect();
    let span = rel[rel.len() - 1];
    if span + TIME_EPS < 3.0 * dt {
        return Err(SkipReason::TooShort { span });
    }
    let steps = ((span + TIME_EPS) / dt).floor() as usize;
    let mut t = Vec::with_capacity(steps + 1);
    let mut pos = Vec::with_capacity(steps + 1);
    let mut j = 0;
    for k in 0..=steps {
        let tk = k as f64 * dt;
        while j + 2 < rel.len() && rel[j + 1] < tk {
            j += 1;
        }
        let (ta, tb) = (rel[j], rel[j + 1]);
        let f = ((tk - ta) / (tb - ta)).clamp(0.0, 1.0);
        let (a, b) = (pts[j].world, pts[j + 1].world);
        pos.push(WorldPoint::new(
            a.easting + f * (b.easting - a.easting),
            a.northing + f * (b.northing - a.northing),
        ));
        t.push(t0 + tk);
    }
    let r: Vec<f64> = pos.iter().map(|p| radial_distance(*p, stop_bar)).collect();
    let v: Vec<f64> = derivative(&r, dt).into_iter().map(|d| -d).collect();
    let a = derivative(&v, dt);
    Ok(KinematicSeries { t, r, v, a, pos })
}

/// Signed robust deceleration: the configured low percentile of `window`.
pub fn robust_decel(window: &[f64], th: &BrakingThresholds) -> Result<f64, BrakingError> {
    stats::quantile(window, th.robust_percentile / 100.0).ok_or(BrakingError::EmptyWindow)
}

/// Inclusive index range into a [`KinematicSeries`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Candidate {
    pub start: usize,
    pub end: usize,
}

/// Maximal runs with `a < -a_trigger`. Two runs are joined when the samples
/// between them span less than [`MERGE_GAP`] seconds, so a single noisy
/// sample on a 0.1 s grid does not split an event.
pub fn detect_events(k: &KinematicSeries, th: &BrakingThresholds) -> Vec<Candidate> {
    let mut runs: Vec<Candidate> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, a) in k.a.iter().enumerate() {
        let braking = *a < -th.a_trigger;
        match (braking, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                runs.push(Candidate { start: s, end: i - 1 });
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        runs.push(Candidate { start: s, end: k.a.len() - 1 });
    }
    let mut merged: Vec<Candidate> = Vec::with_capacity(runs.len());
    for run in runs {
        if let Some(last) = merged.last_mut() {
            let gap = k.t[run.start - 1] - k.t[last.end + 1];
            if gap < MERGE_GAP - TIME_EPS {
                last.end = run.end;
                continue;
            }
        }
        merged.push(run);
    }
    merged
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrakingEvent {
    pub track_id: i64,
    pub video_id: String,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    /// s, equal to `t_end - t_start` at microsecond resolution.
    pub duration: f64,
    /// m/s^2, magnitude of the mean approach acceleration.
    pub a_bar: f64,
    /// m/s^2, magnitude of the robust percentile.
    pub a_robust: f64,
    /// m, distance to the stop bar at `t_start`.
    pub r_start: f64,
    pub mean_position: WorldPoint,
    pub severity: Severity,
    /// m/s^2
    pub peak_decel: f64,
}

impl BrakingEvent {
    pub fn to_ndjson_line(&self) -> String {
        serde_json::to_string(self).expect("event serialises")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    RobustGate { a_robust: f64, required: f64 },
    Duration { duration: f64, required: f64 },
    SubMild { a_bar: f64 },
}

/// Identifies the track an event belongs to.
#[derive(Debug, Clone)]
pub struct EventContext<'a> {
    pub track_id: i64,
    pub video_id: &'a str,
    /// UTC offset used when rendering event times.
    pub offset_s: i32,
}

pub fn validate_event(cand: Candidate, k: &KinematicSeries, th: &BrakingThresholds, ctx: &EventContext<'_>) -> Result<BrakingEvent, Rejection> {
    let window = &k.a[cand.start..=cand.end];
    let robust = robust_decel(window, th).expect("candidate windows are non-empty");
    if robust.abs() < th.robust_gate() {
        return Err(Rejection::RobustGate {
            a_robust: robust.abs(),
            required: th.robust_gate(),
        });
    }
    let t_start = Timestamp::from_epoch_seconds(k.t[cand.start], ctx.offset_s);
    let t_end = Timestamp::from_epoch_seconds(k.t[cand.end], ctx.offset_s);
    let duration = (t_end.micros() - t_start.micros()) as f64 / 1e6;
    if duration + TIME_EPS < th.min_duration {
        return Err(Rejection::Duration {
            duration,
            required: th.min_duration,
        });
    }
    let a_bar = stats::mean(window).expect("non-empty").abs();
    let Some(severity) = classify_severity(a_bar, th) else {
        return Err(Rejection::SubMild { a_bar });
    };
    let span = &k.pos[cand.start..=cand.end];
    let n = span.len() as f64;
    let mean_position = WorldPoint::new(
        span.iter().map(|p| p.easting).sum::<f64>() / n,
        span.iter().map(|p| p.northing).sum::<f64>() / n,
    );
    let peak_decel = window.iter().cloned().fold(f64::INFINITY, f64::min).abs();
    Ok(BrakingEvent {
        track_id: ctx.track_id,
        video_id: ctx.video_id.to_string(),
        t_start,
        t_end,
        duration,
        a_bar,
        a_robust: robust.abs(),
        r_start: k.r[cand.start],
        mean_position,
        severity,
        peak_decel,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrackOutcome {
    pub events: Vec<BrakingEvent>,
    pub rejections: Vec<Rejection>,
    pub skipped: Option<SkipReason>,
}

impl TrackOutcome {
    pub fn sub_mild(&self) -> usize {
        self.rejections.iter().filter(|r| matches!(r, Rejection::SubMild { .. })).count()
    }
}

/// Kinematics, detection and validation for one trajectory.
pub fn analyze_trajectory(traj: &Trajectory, stop_bar: &Segment, th: &BrakingThresholds, dt: f64, offset_s: i32) -> TrackOutcome {
    let k = match kinematics(traj, stop_bar, dt) {
        Ok(k) => k,
        Err(reason) => {
            return TrackOutcome {
                skipped: Some(reason),
                ..Default::default()
            }
        }
    };
    let ctx = EventContext {
        track_id: traj.track_id,
        video_id: &traj.video_id,
        offset_s,
    };
    let mut out = TrackOutcome::default();
    for cand in detect_events(&k, th) {
        match validate_event(cand, &k, th, &ctx) {
            Ok(e) => out.events.push(e),
            Err(r) => out.rejections.push(r),
        }
    }
    out
}

/// Output order for event lists: start time, then track.
pub fn sort_events(events: &mut [BrakingEvent]) {
    events.sort_by(|a, b| {
        a.t_start
            .micros()
            .cmp(&b.t_start.micros())
            .then(a.track_id.cmp(&b.track_id))
            .then(a.video_id.cmp(&b.video_id))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{CameraPoint, OrthoPoint};
    use crate::tracks::TrackPoint;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn bar() -> Segment {
        Segment::new(WorldPoint::new(0.0, 0.0), WorldPoint::new(10.0, 0.0))
    }

    fn th() -> BrakingThresholds {
        BrakingThresholds::default()
    }

    /// Vehicle on the line e = 5 heading towards the bar with r(t) given.
    fn traj_from(r: impl Fn(f64) -> f64, n: usize, dt: f64) -> Trajectory {
        Trajectory {
            track_id: 1,
            video_id: "v".into(),
            class_label: "car".into(),
            smoothed: false,
            points: (0..n)
                .map(|i| {
                    let t = i as f64 * dt;
                    TrackPoint {
                        t,
                        cam: CameraPoint::new(0.0, 0.0),
                        ortho: OrthoPoint::new(0.0, 0.0),
                        world: WorldPoint::new(5.0, r(t)),
                    }
                })
                .collect(),
        }
    }

    fn series(a: Vec<f64>, dt: f64) -> KinematicSeries {
        let n = a.len();
        KinematicSeries {
            t: (0..n).map(|i| i as f64 * dt).collect(),
            r: (0..n).map(|i| 100.0 - i as f64).collect(),
            v: vec![10.0; n],
            a,
            pos: (0..n).map(|i| WorldPoint::new(5.0, 100.0 - i as f64)).collect(),
        }
    }

    fn ctx() -> EventContext<'static> {
        EventContext {
            track_id: 1,
            video_id: "v",
            offset_s: 0,
        }
    }

    #[test]
    fn band_edges_from_gravity() {
        let t = th();
        assert!((t.mild_lo() - 1.4715).abs() < 1e-12);
        assert!((t.moderate_lo() - 2.4525).abs() < 1e-12);
        assert!((t.severe_lo() - 3.924).abs() < 1e-12);
        assert!((t.robust_gate() - 0.2125).abs() < 1e-15);
        t.validate().unwrap();
        let bad = BrakingThresholds { mild_lo_g: 0.3, ..th() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn radial_distance_examples() {
        assert_eq!(radial_distance(WorldPoint::new(5.0, 3.0), &bar()), 3.0);
        assert_eq!(radial_distance(WorldPoint::new(13.0, 4.0), &bar()), 5.0);
        assert_eq!(radial_distance(WorldPoint::new(7.5, 0.0), &bar()), 0.0);
    }

    #[test]
    fn kinematics_constant_approach() {
        let k = kinematics(&traj_from(|t| 50.0 - 10.0 * t, 31, 0.1), &bar(), 0.1).unwrap();
        for i in 1..k.len() - 1 {
            assert!((k.v[i] - 10.0).abs() < 1e-9);
            assert!(k.a[i].abs() < 1e-9);
        }
    }

    #[test]
    fn kinematics_quadratic_braking() {
        // r'' = 3 so the approach acceleration is -3 everywhere.
        let k = kinematics(&traj_from(|t| 50.0 - 10.0 * t + 1.5 * t * t, 31, 0.1), &bar(), 0.1).unwrap();
        for i in 1..k.len() - 1 {
            assert!((k.a[i] + 3.0).abs() < 1e-6, "a[{i}] = {}", k.a[i]);
        }
    }

    #[test]
    fn kinematics_stationary_and_resampled() {
        let k = kinematics(&traj_from(|_| 20.0, 12, 0.1), &bar(), 0.1).unwrap();
        assert!(k.v.iter().chain(k.a.iter()).all(|x| x.abs() < 1e-12));
        // 30 fps input onto a 0.1 s grid.
        let k = kinematics(&traj_from(|t| 50.0 - 10.0 * t, 61, 1.0 / 30.0), &bar(), 0.1).unwrap();
        assert_eq!(k.len(), 21);
        assert!((k.r[10] - 40.0).abs() < 1e-9);
    }

    #[test]
    fn kinematics_skips_short_tracks() {
        assert_eq!(
            kinematics(&traj_from(|t| 50.0 - t, 4, 0.1), &bar(), 0.1),
            Err(SkipReason::TooFewPoints { points: 4 })
        );
        assert!(matches!(
            kinematics(&traj_from(|t| 50.0 - t, 5, 0.05), &bar(), 0.1),
            Err(SkipReason::TooShort { .. })
        ));
    }

    #[test]
    fn robust_decel_examples() {
        assert_eq!(robust_decel(&[-3.0; 21], &th()).unwrap(), -3.0);
        let ramp: Vec<f64> = (0..21).map(|i| -5.0 + 0.1 * i as f64).collect();
        assert!((robust_decel(&ramp, &th()).unwrap() + 4.9).abs() < 1e-12);
        assert_eq!(robust_decel(&[-2.0], &th()).unwrap(), -2.0);
        assert_eq!(robust_decel(&[], &th()), Err(BrakingError::EmptyWindow));
    }

    fn brute_force_p5(window: &[f64]) -> f64 {
        let mut s = window.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = 0.05 * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        if lo + 1 >= s.len() {
            return s[lo];
        }
        s[lo] + (s[lo + 1] - s[lo]) * (pos - lo as f64)
    }

    #[test]
    fn robust_decel_matches_oracle_on_random_windows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(-1.0, 2.0).unwrap();
        for n in 0..1000 {
            let len = 1 + n % 97;
            let w: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
            assert_eq!(robust_decel(&w, &th()).unwrap(), brute_force_p5(&w));
        }
    }

    #[test]
    fn detect_examples() {
        assert!(detect_events(&series(vec![0.0; 50], 0.1), &th()).is_empty());
        let mut a = vec![0.0; 40];
        a[10..=20].iter_mut().for_each(|x| *x = -0.3);
        let c = detect_events(&series(a, 0.1), &th());
        assert_eq!(c, vec![Candidate { start: 10, end: 20 }]);

        // 20 ms frame grid: a 0.04 s interruption between two blocks merges.
        let mut a = vec![0.0; 100];
        a[10..30].iter_mut().for_each(|x| *x = -1.0);
        a[33..60].iter_mut().for_each(|x| *x = -1.0);
        let c = detect_events(&series(a, 0.02), &th());
        assert_eq!(c, vec![Candidate { start: 10, end: 59 }]);
    }

    #[test]
    fn merge_gap_on_the_default_grid() {
        let mut one = vec![0.0; 40];
        one[5..15].iter_mut().for_each(|x| *x = -2.0);
        one[16..25].iter_mut().for_each(|x| *x = -2.0);
        assert_eq!(detect_events(&series(one, 0.1), &th()).len(), 1);
        let mut two = vec![0.0; 40];
        two[5..15].iter_mut().for_each(|x| *x = -2.0);
        two[17..25].iter_mut().for_each(|x| *x = -2.0);
        assert_eq!(detect_events(&series(two, 0.1), &th()).len(), 2);
    }

    #[test]
    fn validate_examples() {
        let mut a = vec![0.0; 40];
        a[5..=20].iter_mut().for_each(|x| *x = -3.0);
        let k = series(a, 0.1);
        let e = validate_event(Candidate { start: 5, end: 20 }, &k, &th(), &ctx()).unwrap();
        assert!((e.a_bar - 3.0).abs() < 1e-12);
        assert!((e.duration - 1.5).abs() < 1e-9);
        assert_eq!(e.severity, Severity::Moderate);
        assert_eq!(e.r_start, 95.0);

        let mut a = vec![0.0; 40];
        a[5..7].iter_mut().for_each(|x| *x = -0.3);
        let k = series(a, 0.075);
        assert!(matches!(
            validate_event(Candidate { start: 5, end: 6 }, &k, &th(), &ctx()),
            Err(Rejection::Duration { .. })
        ));

        let mut a = vec![-0.20; 21];
        a[10] = -5.0;
        let k = series(a, 0.1);
        match validate_event(Candidate { start: 0, end: 20 }, &k, &th(), &ctx()) {
            Err(Rejection::RobustGate { a_robust, .. }) => assert!((a_robust - 0.20).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sub_mild_events_are_dropped() {
        let mut a = vec![0.0; 40];
        a[5..=20].iter_mut().for_each(|x| *x = -1.0);
        assert_eq!(
            validate_event(Candidate { start: 5, end: 20 }, &series(a, 0.1), &th(), &ctx()),
            Err(Rejection::SubMild { a_bar: 1.0 })
        );
    }

    #[test]
    fn severity_bands() {
        let t = th();
        assert_eq!(classify_severity(2.0, &t), Some(Severity::Mild));
        assert_eq!(classify_severity(2.4525, &t), Some(Severity::Moderate));
        assert_eq!(classify_severity(3.924, &t), Some(Severity::Severe));
        assert_eq!(classify_severity(1.4715, &t), Some(Severity::Mild));
        assert_eq!(classify_severity(1.47, &t), None);
        assert_eq!(classify_severity(3.0, &t), Some(Severity::Moderate));
    }

    #[test]
    fn event_serialises_with_iso_times() {
        let mut a = vec![0.0; 40];
        a[5..=20].iter_mut().for_each(|x| *x = -4.0);
        let mut k = series(a, 0.1);
        k.t.iter_mut().for_each(|t| *t += 1_739_448_000.0);
        let e = validate_event(Candidate { start: 5, end: 20 }, &k, &th(), &ctx()).unwrap();
        let line = e.to_ndjson_line();
        assert!(line.contains("\"severity\":\"severe\""), "{line}");
        assert!(
            line.contains("\"t_start\":\"2025-02-13T12:00:00.500000Z\"") || line.contains("\"t_start\":\"2025-02-13T12:00:00.500000+00:00\""),
            "{line}"
        );
        let back: BrakingEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(back, e);
        let missing = line.replace(",\"severity\":\"severe\"", "");
        assert!(serde_json::from_str::<BrakingEvent>(&missing).is_err());
    }

    #[test]
    fn constant_speed_track_has_no_events() {
        let traj = traj_from(|t| 80.0 - 12.0 * t, 200, 1.0 / 30.0);
        let out = analyze_trajectory(&traj, &bar(), &th(), DEFAULT_DT, 0);
        assert!(out.events.is_empty() && out.rejections.is_empty());
    }

    #[test]
    fn noisy_constant_deceleration_is_recovered() {
        let normal = Normal::new(0.0, 0.2).unwrap();
        for (seed, a0) in [1.6, 3.0, 4.5].into_iter().enumerate() {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed as u64);
            let a: Vec<f64> = (0..80)
                .map(|i| if (20..40).contains(&i) { -a0 } else { 0.0 } + normal.sample(&mut rng))
                .collect();
            let k = series(a, 0.1);
            let events: Vec<_> = detect_events(&k, &th())
                .into_iter()
                .filter_map(|c| validate_event(c, &k, &th(), &ctx()).ok())
                .collect();
            let main = events.iter().max_by(|x, y| x.duration.total_cmp(&y.duration)).expect("event found");
            assert!((main.a_bar - a0).abs() <= 0.3, "a0 {a0}: a_bar {}", main.a_bar);
        }
    }

    proptest! {
        #[test]
        fn gates_are_monotone_in_scale(
            profile in prop::collection::vec(-6.0f64..-0.26, 3..40),
            lambda in 1.0f64..4.0,
        ) {
            let n = profile.len();
            let k = series(profile.clone(), 0.1);
            let cand = Candidate { start: 0, end: n - 1 };
            if let Ok(e) = validate_event(cand, &k, &th(), &ctx()) {
                let scaled = series(profile.iter().map(|a| a * lambda).collect(), 0.1);
                let e2 = validate_event(cand, &scaled, &th(), &ctx());
                prop_assert!(e2.is_ok());
                prop_assert!(e2.unwrap().severity >= e.severity);
            }
        }

        #[test]
        fn materialised_events_are_at_least_mild(a in prop::collection::vec(-6.0f64..1.0, 10..80)) {
            let k = series(a, 0.1);
            for c in detect_events(&k, &th()) {
                if let Ok(e) = validate_event(c, &k, &th(), &ctx()) {
                    prop_assert!(e.a_bar >= 1.4715);
                    prop_assert!(e.duration >= 0.2 - 1e-9);
                    prop_assert!(e.r_start >= 0.0);
                }
            }
        }

        #[test]
        fn constant_speed_never_triggers(v in 1.0f64..30.0, r0 in 30.0f64..150.0, n in 10usize..200) {
            // Stay upstream of the bar; crossing it folds r(t) into a V.
            prop_assume!(r0 - v * n as f64 / 30.0 > 1.0);
            let traj = traj_from(|t| r0 - v * t, n, 1.0 / 30.0);
            let out = analyze_trajectory(&traj, &bar(), &th(), DEFAULT_DT, 0);
            prop_assert!(out.events.is_empty());
        }
    }
}
