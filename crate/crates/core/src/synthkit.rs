//! Synthetic scenes with known ground truth.
//!
//! Generators here run the measurement chain backwards: a known world
//! trajectory is mapped through a known geotransform and homography into
//! camera pixels and written out in the same detection and sidecar formats
//! that real ingestion reads. Everything is seed-deterministic.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::analytics::ObservedHours;
use crate::braking::{BrakingEvent, KinematicSeries, Severity};
use crate::correspond::{AnalysisSide, CorrespondencePair, Segment, SiteAnnotations};
use crate::geom::{CameraPoint, OrthoPoint, WorldPoint};
use crate::homog::{estimate_dlt, HomogError, Homography};
use crate::ortho::GeoTransform;
use crate::time::Timestamp;
use crate::tracks::{Detection, VideoMeta};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error(transparent)]
    Homography(#[from] HomogError),
}

/// Random camera -> ortho homography for a 1280x720 frame. Seed 0 is
/// reserved for the identity. Perspective terms (with `h33 = 1`) stay
/// within 4e-4 so that the whole frame lies in front of the horizon.
pub fn gen_homography(seed: u64) -> Homography {
    if seed == 0 {
        return Homography::identity();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: f64 = rng.random_range(0.5..2.0);
    let theta: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let aspect: f64 = rng.random_range(0.8..1.25);
    let shear: f64 = rng.random_range(-0.2..0.2);
    let tx: f64 = rng.random_range(-200.0..800.0);
    let ty: f64 = rng.random_range(-200.0..800.0);
    let p1: f64 = rng.random_range(-4e-4..4e-4);
    let p2: f64 = rng.random_range(-4e-4..4e-4);
    let (c, s) = (theta.cos(), theta.sin());
    let a = [
        scale * aspect * c,
        scale * (shear * c - s / aspect),
        scale * aspect * s,
        scale * (shear * s + c / aspect),
    ];
    Homography::from_row_major([a[0], a[1], tx, a[2], a[3], ty, p1, p2, 1.0]).expect("generated homography is invertible")
}

/// Frame size assumed by [`gen_homography`] and [`gen_pairs`].
pub const DEFAULT_FRAME: (u32, u32) = (1280, 720);

/// Correspondences for `h`: `n_inliers` uniform camera points with Gaussian
/// noise `noise_px` on the ortho side, then `n_outliers` gross mismatches.
/// Returns the pairs and the true inlier mask.
pub fn gen_pairs(h: &Homography, n_inliers: usize, n_outliers: usize, noise_px: f64, seed: u64) -> (Vec<CorrespondencePair>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_px.max(0.0)).expect("valid sigma");
    let (w, hgt) = (DEFAULT_FRAME.0 as f64, DEFAULT_FRAME.1 as f64);
    let mut pairs = Vec::new();
    let mut mask = Vec::new();
    let mut id = 1;
    while pairs.len() < n_inliers {
        let cam = CameraPoint::new(rng.random_range(0.0..w), rng.random_range(0.0..hgt));
        let Ok(o) = h.project(cam) else { continue };
        let ortho = OrthoPoint::new(o.x + noise.sample(&mut rng), o.y + noise.sample(&mut rng));
        pairs.push(CorrespondencePair { id, cam, ortho, label: None });
        mask.push(true);
        id += 1;
    }
    let corners: Vec<OrthoPoint> = [(0.0, 0.0), (w, 0.0), (w, hgt), (0.0, hgt)]
        .iter()
        .filter_map(|&(u, v)| h.project(CameraPoint::new(u, v)).ok())
        .collect();
    let (xmin, xmax) = corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.x), a.1.max(p.x)));
    let (ymin, ymax) = corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.y), a.1.max(p.y)));
    let mut added = 0;
    while added < n_outliers {
        let cam = CameraPoint::new(rng.random_range(0.0..w), rng.random_range(0.0..hgt));
        let ortho = OrthoPoint::new(rng.random_range(xmin..xmax), rng.random_range(ymin..ymax));
        let Ok(truth) = h.project(cam) else { continue };
        if (truth.x - ortho.x).hypot(truth.y - ortho.y) < 50.0 {
            continue;
        }
        pairs.push(CorrespondencePair { id, cam, ortho, label: None });
        mask.push(false);
        id += 1;
        added += 1;
    }
    (pairs, mask)
}

/// One camera pixel and the ortho pixel it must land on.
pub type QuadCorner = ((f64, f64), (f64, f64));

/// A complete synthetic site: georeferenced ortho, a camera looking at one
/// approach lane, and the stop bar / median annotations.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub site_id: String,
    pub geotransform: GeoTransform,
    pub ortho_size: (u32, u32),
    pub camera_size: (u32, u32),
    /// Camera -> ortho.
    pub homography: Homography,
    pub annotations: SiteAnnotations,
    /// Lane centre where it meets the stop bar, world metres.
    pub lane_at_bar: WorldPoint,
    /// Unit travel direction of the approach lane.
    pub heading: (f64, f64),
}

impl SynthScene {
    /// A side-looking 4K camera over a 100 m x 100 m ortho at 0.1 m/px,
    /// UTM-sized origin. The northbound lane runs along ortho `x = 470` and
    /// stops at a bar 20 m below the top edge; the camera sees about 75 m
    /// of it at roughly 2 cm per pixel along the lane.
    pub fn standard() -> Self {
        let gt = GeoTransform::new(421_000.05, 2_718_099.95, 0.1, 0.1, "EPSG:32617").expect("valid transform");
        // Ortho road corners -> camera trapezoid. The far kerb sits higher in
        // the frame and is slightly foreshortened.
        let quad = [
            ((600.0, 950.0), (80.0, 2000.0)),
            ((600.0, 150.0), (3760.0, 2000.0)),
            ((400.0, 150.0), (3500.0, 900.0)),
            ((400.0, 950.0), (340.0, 900.0)),
        ];
        Self::from_quad("synth", gt, (1000, 1000), (3840, 2160), &quad)
    }

    /// Builds a scene whose homography maps each camera point of `quad`
    /// onto its ortho point.
    pub fn from_quad(site_id: &str, geotransform: GeoTransform, ortho_size: (u32, u32), camera_size: (u32, u32), quad: &[QuadCorner; 4]) -> Self {
        let pairs: Vec<CorrespondencePair> = quad
            .iter()
            .enumerate()
            .map(|(i, &((x, y), (u, v)))| CorrespondencePair {
                id: i as u32 + 1,
                cam: CameraPoint::new(u, v),
                ortho: OrthoPoint::new(x, y),
                label: None,
            })
            .collect();
        let homography = estimate_dlt(&pairs).expect("scene quad is non-degenerate");
        let w = |x: f64, y: f64| geotransform.pixel_to_world(OrthoPoint::new(x, y));
        let annotations = SiteAnnotations {
            stop_bar: Segment::new(w(400.0, 200.0), w(500.0, 200.0)),
            median_line: vec![w(500.0, 950.0), w(500.0, 50.0)],
            analysis_side: AnalysisSide::Both,
        };
        Self {
            site_id: site_id.to_string(),
            lane_at_bar: w(470.0, 200.0),
            heading: (0.0, 1.0),
            geotransform,
            ortho_size,
            camera_size,
            homography,
            annotations,
        }
    }

    /// Flat-shaded ortho: asphalt lanes, white stop bar, yellow median.
    pub fn render_ortho(&self) -> RgbImage {
        let (w, h) = self.ortho_size;
        RgbImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as i64, y as i64);
            if (400..600).contains(&x) {
                if (497..503).contains(&x) {
                    Rgb([230, 200, 40])
                } else if (198..203).contains(&y) && x < 500 {
                    Rgb([245, 245, 245])
                } else if (x / 20 + y / 20) % 2 == 0 {
                    Rgb([70, 70, 75])
                } else {
                    Rgb([80, 80, 85])
                }
            } else if (x / 50 + y / 50) % 2 == 0 {
                Rgb([60, 120, 60])
            } else {
                Rgb([90, 140, 70])
            }
        })
    }

    /// The ortho seen through the camera; sky where the ground is not
    /// visible.
    pub fn render_camera(&self) -> RgbImage {
        let ortho = self.render_ortho();
        let warped = crate::homog::warp_image(&self.homography.inverse(), &ortho, self.camera_size).expect("scene homography invertible");
        RgbImage::from_fn(self.camera_size.0, self.camera_size.1, |x, y| {
            let p = warped.get_pixel(x, y).0;
            if p[3] == 0 {
                Rgb([150, 180, 220])
            } else {
                Rgb([p[0], p[1], p[2]])
            }
        })
    }

    /// Ortho/camera pairs over the scene's ground grid.
    pub fn correspondences(&self, n: usize, noise_px: f64, seed: u64) -> Vec<CorrespondencePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_px.max(0.0)).expect("valid sigma");
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let ortho = OrthoPoint::new(rng.random_range(380.0..620.0), rng.random_range(160.0..940.0));
            let Ok(cam) = self.homography.project_inverse(ortho) else { continue };
            let (cw, ch) = (self.camera_size.0 as f64, self.camera_size.1 as f64);
            if !(0.0..cw).contains(&cam.u) || !(0.0..ch).contains(&cam.v) {
                continue;
            }
            out.push(CorrespondencePair {
                id: out.len() as u32 + 1,
                cam: CameraPoint::new(cam.u + noise.sample(&mut rng), cam.v + noise.sample(&mut rng)),
                ortho,
                label: None,
            });
        }
        out
    }

    fn world_on_lane(&self, r: f64) -> WorldPoint {
        WorldPoint::new(self.lane_at_bar.easting - self.heading.0 * r, self.lane_at_bar.northing - self.heading.1 * r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApproachProfile {
    /// m/s
    pub v0: f64,
    /// m/s^2, magnitude; 0 means no braking.
    pub a_brake: f64,
    /// Distance to the stop bar where braking begins, m.
    pub brake_at_r: f64,
    /// Distance to the stop bar when the track starts, m.
    pub start_r: f64,
    /// Time spent stationary after stopping, s.
    pub dwell: f64,
}

impl ApproachProfile {
    pub fn braking(v0: f64, a_brake: f64, brake_at_r: f64) -> Self {
        Self {
            v0,
            a_brake,
            brake_at_r,
            start_r: brake_at_r + 15.0,
            dwell: 2.0,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !(self.v0 > 0.0) {
            return Err(SynthError::Profile("v0 must be positive".into()));
        }
        if !(self.a_brake >= 0.0) {
            return Err(SynthError::Profile("a_brake must be non-negative".into()));
        }
        if !(self.start_r >= self.brake_at_r && self.brake_at_r >= 0.0) {
            return Err(SynthError::Profile("need start_r >= brake_at_r >= 0".into()));
        }
        Ok(())
    }

    /// `(r, approach speed, approach acceleration)` at time `t` from the
    /// track start.
    pub fn state(&self, t: f64) -> (f64, f64, f64) {
        let t1 = (self.start_r - self.brake_at_r) / self.v0;
        if t < t1 || self.a_brake == 0.0 {
            return (self.start_r - self.v0 * t, self.v0, 0.0);
        }
        let tau = t - t1;
        let t_stop = self.v0 / self.a_brake;
        if tau < t_stop {
            (
                self.brake_at_r - self.v0 * tau + 0.5 * self.a_brake * tau * tau,
                self.v0 - self.a_brake * tau,
                -self.a_brake,
            )
        } else {
            (self.stop_r(), 0.0, 0.0)
        }
    }

    pub fn stop_r(&self) -> f64 {
        if self.a_brake == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.brake_at_r - self.v0 * self.v0 / (2.0 * self.a_brake)
        }
    }

    /// Time from track start to braking onset.
    pub fn brake_time(&self) -> f64 {
        (self.start_r - self.brake_at_r) / self.v0
    }
}

#[derive(Debug, Clone)]
pub struct Approach {
    pub truth: KinematicSeries,
    pub detections: Vec<Detection>,
    pub meta: VideoMeta,
    /// The vehicle reaches the stop bar before it has finished braking.
    pub crosses_stop_bar: bool,
}

impl Approach {
    pub fn detections_ndjson(&self) -> String {
        let mut s = String::new();
        for d in &self.detections {
            s.push_str(&serde_json::to_string(d).expect("detection serialises"));
            s.push('\n');
        }
        s
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("meta serialises")
    }
}

pub struct ApproachOptions {
    pub fps: f64,
    pub noise_px: f64,
    pub seed: u64,
    pub track_id: i64,
    pub video_id: String,
    pub start: Timestamp,
}

impl Default for ApproachOptions {
    fn default() -> Self {
        Self {
            fps: 30.0,
            noise_px: 0.0,
            seed: 42,
            track_id: 1,
            video_id: "synth-0001".into(),
            // 2025-02-13 08:00:00 -05:00
            start: Timestamp::from_micros(1_739_451_600_000_000, -5 * 3600),
        }
    }
}

const BOX_W: f64 = 180.0;
const BOX_H: f64 = 120.0;

/// One vehicle approaching the stop bar under `profile`. The world track is
/// analytic; it is pushed through the geotransform and the inverse
/// homography into camera pixels, where Gaussian noise is added to the
/// ground point.
pub fn gen_approach(scene: &SynthScene, profile: &ApproachProfile, opts: &ApproachOptions) -> Result<Approach, SynthError> {
    profile.validate()?;
    if !(opts.fps > 0.0) {
        return Err(SynthError::Profile("fps must be positive".into()));
    }
    let crosses = profile.a_brake == 0.0 || profile.stop_r() < 0.0;
    let end = if crosses {
        // Follow the vehicle up to the bar.
        let t1 = profile.brake_time();
        if profile.a_brake == 0.0 {
            profile.start_r / profile.v0
        } else {
            let disc = profile.v0 * profile.v0 - 2.0 * profile.a_brake * profile.brake_at_r;
            t1 + (profile.v0 - disc.max(0.0).sqrt()) / profile.a_brake
        }
    } else {
        profile.brake_time() + profile.v0 / profile.a_brake + profile.dwell
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let noise = Normal::new(0.0, opts.noise_px.max(0.0)).expect("valid sigma");
    let k = opts.geotransform_scale(scene);
    let w_ref = scene
        .homography
        .inverse()
        .apply_homogeneous(CameraPoint::new(scene.ortho_size.0 as f64 / 2.0, scene.ortho_size.1 as f64 / 2.0))
        .w
        .abs();
    let t0 = opts.start.epoch_seconds();
    let mut truth = KinematicSeries {
        t: Vec::new(),
        r: Vec::new(),
        v: Vec::new(),
        a: Vec::new(),
        pos: Vec::new(),
    };
    let mut detections = Vec::new();
    let frames = (end * opts.fps + 1e-9).floor() as u64;
    for frame in 0..=frames {
        let t = frame as f64 / opts.fps;
        let (r, v, a) = profile.state(t);
        let world = scene.world_on_lane(r);
        let ortho = scene.geotransform.world_to_pixel(WorldPoint::new(world.easting / k, world.northing / k));
        let hw = scene.homography.inverse().apply_homogeneous(CameraPoint::new(ortho.x, ortho.y));
        let cam = scene.homography.project_inverse(ortho)?;
        let size = w_ref / hw.w.abs();
        let (u, vv) = (cam.u + noise.sample(&mut rng), cam.v + noise.sample(&mut rng));
        let (bw, bh) = (BOX_W * size, BOX_H * size);
        detections.push(Detection {
            video_id: opts.video_id.clone(),
            frame_idx: frame,
            track_id: opts.track_id,
            class_label: "car".into(),
            bbox: [u - bw / 2.0, vv - bh, bw, bh],
            confidence: 0.9,
        });
        truth.t.push(t0 + t);
        truth.r.push(r);
        truth.v.push(v);
        truth.a.push(a);
        truth.pos.push(world);
    }
    Ok(Approach {
        truth,
        detections,
        meta: VideoMeta {
            video_id: opts.video_id.clone(),
            start_time: opts.start,
            fps: opts.fps,
            filename: format!("{}.mp4", opts.video_id),
        },
        crosses_stop_bar: crosses,
    })
}

impl ApproachOptions {
    fn geotransform_scale(&self, scene: &SynthScene) -> f64 {
        scene.geotransform.metres_per_unit().unwrap_or(1.0)
    }
}

/// Events with known aggregate statistics, for exercising the report
/// products without running the detector chain.
#[derive(Debug, Clone)]
pub struct EventCorpus {
    pub events: Vec<BrakingEvent>,
    pub observed: ObservedHours,
    /// Mean daily count per (hour, severity), computed while generating.
    pub hourly_truth: BTreeMap<(u32, Severity), f64>,
    /// r_start values in generation order.
    pub r_starts: Vec<f64>,
    pub days: u32,
}

/// `n` events spread over `days` consecutive days, hours 7..=18 local time
/// (UTC-5). Severity and r_start are drawn from per-severity distributions
/// so mild events sit farther from the bar than severe ones.
pub fn gen_event_corpus(seed: u64, n: usize, days: u32) -> EventCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = -5 * 3600;
    // 2025-02-10 00:00:00 -05:00
    let day0 = 1_739_163_600i64;
    let first = chrono::NaiveDate::from_ymd_opt(2025, 2, 10).expect("valid date");
    let last = first + chrono::Duration::days(days as i64 - 1);
    let observed = ObservedHours::from_date_range(first, last, 7..=18).expect("valid window");
    let mut tallies: BTreeMap<(u32, Severity), u32> = BTreeMap::new();
    let mut events = Vec::with_capacity(n);
    let mut r_starts = Vec::with_capacity(n);
    for i in 0..n {
        let day = rng.random_range(0..days) as i64;
        // Peak-heavy hour profile: afternoon hours are drawn twice as often.
        let hour = if rng.random_bool(0.4) {
            rng.random_range(15..=18)
        } else {
            rng.random_range(7..=18)
        };
        let sec = rng.random_range(0..3600) as i64;
        let severity = match rng.random_range(0..100) {
            0..=59 => Severity::Mild,
            60..=89 => Severity::Moderate,
            _ => Severity::Severe,
        };
        let (a_lo, a_hi, r_mu): (f64, f64, f64) = match severity {
            Severity::Mild => (1.4715, 2.4525, 38.0),
            Severity::Moderate => (2.4525, 3.924, 28.0),
            Severity::Severe => (3.924, 6.0, 18.0),
        };
        let a_bar: f64 = rng.random_range(a_lo..a_hi);
        let r_start = (r_mu + Normal::<f64>::new(0.0, 10.0).expect("valid sigma").sample(&mut rng)).max(0.5);
        let duration = rng.random_range(5..40) as f64 / 10.0;
        let start_micros = (day0 + day * 86_400 + hour as i64 * 3600 + sec) * 1_000_000;
        let t_start = Timestamp::from_micros(start_micros, offset);
        let t_end = Timestamp::from_micros(start_micros + (duration * 1e6) as i64, offset);
        *tallies.entry((hour, severity)).or_default() += 1;
        r_starts.push(r_start);
        events.push(BrakingEvent {
            track_id: i as i64 + 1,
            video_id: format!("corpus-day{}", day + 1),
            t_start,
            t_end,
            duration: (t_end.micros() - t_start.micros()) as f64 / 1e6,
            a_bar,
            a_robust: a_bar * 1.1,
            r_start,
            mean_position: WorldPoint::new(421_047.0, 2_718_050.0 - r_start / 2.0),
            severity,
            peak_decel: a_bar * 1.3,
        });
    }
    let mut hourly_truth = BTreeMap::new();
    for hour in 7..=18 {
        for s in Severity::ALL {
            let c = tallies.get(&(hour, s)).copied().unwrap_or(0);
            hourly_truth.insert((hour, s), c as f64 / days as f64);
        }
    }
    EventCorpus {
        events,
        observed,
        hourly_truth,
        r_starts,
        days,
    }
}
