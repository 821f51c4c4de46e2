//! Ground-plane homography between the camera image and the orthoimage.
//!
//! A [`Homography`] maps camera pixels `(u, v)` to ortho pixels `(x, y)`:
//! `(x', y', w) = H (u, v, 1)` and `(x, y) = (x' / w, y' / w)`. Matrices are
//! stored Frobenius-normalised with a fixed sign so serialised values are
//! canonical.

mod dlt;
mod registry;
mod robust;
mod warp;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::correspond::CorrespondencePair;
use crate::geom::{CameraPoint, OrthoPoint};

pub use dlt::{estimate_dlt, DEGENERACY_TOL};
pub use registry::{select_homography, HomographyRecord, TimeWindow, VideoKey};
pub use robust::{estimate_robust, magsac_loss, EstimateResult, MagsacLoss, RobustParams, Scoring};
pub use warp::{composite_overlay, warp_image};

/// `|w|` below this is treated as a point on the horizon line.
pub const HORIZON_EPS: f64 = 1e-12;
/// Minimum `|det|` of a normalised homography.
pub const MIN_DET: f64 = 1e-12;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum HomogError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("point maps to the horizon (w = {w:e})")]
    Horizon { w: f64 },
    #[error("homography is not invertible (det = {det:e})")]
    Singular { det: f64 },
    #[error("invalid estimation parameters: {0}")]
    Params(String),
    #[error("robust estimation failed after {iterations} iterations: best hypothesis had {best_inliers} inliers ({degenerate_samples} degenerate samples)")]
    NoConsensus {
        iterations: usize,
        best_inliers: usize,
        degenerate_samples: usize,
    },
    #[error("no registered homography matches video {video}")]
    NoMatch { video: String },
}

/// Homogeneous image of a point before the `w` division.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousPoint {
    pub xt: f64,
    pub yt: f64,
    pub w: f64,
}

impl HomogeneousPoint {
    fn dehomogenize(self) -> Result<(f64, f64), HomogError> {
        if self.w.abs() < HORIZON_EPS || !self.w.is_finite() {
            return Err(HomogError::Horizon { w: self.w });
        }
        Ok((self.xt / self.w, self.yt / self.w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
    inv: Matrix3<f64>,
}

/// Mantissa bits kept by the canonical form. Rescaling a canonical matrix
/// perturbs its entries by about five units of roundoff, far below the half
/// quantum this leaves.
const CANONICAL_BITS: i32 = 44;

/// Rounds `x` to `CANONICAL_BITS` significant bits. Scaling by a power of two
/// and rounding are both exact, so this only ever drops low bits.
fn snap(x: f64) -> f64 {
    let exp = ((x.to_bits() >> 52) & 0x7ff) as i32;
    if x == 0.0 || !x.is_finite() || exp == 0 {
        return x;
    }
    let quantum = 2f64.powi(exp - 1023 - CANONICAL_BITS);
    (x / quantum).round() * quantum
}

/// Scale-free canonical form: divide by the largest entry, snap every entry
/// to a coarse grid, then normalise to unit Frobenius norm.
///
/// Any rescaling of a canonical matrix divides back to within a few ulps of
/// the snapped grid point, so the snap recovers it exactly and the result is
/// bit-identical. This is what makes `project(λH) == project(H)` exact for any
/// λ, and it makes canonicalisation idempotent for serialisation round trips.
fn canonicalize(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let pivot = m.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
    if !(pivot.is_finite() && pivot != 0.0) || m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let snapped = m.map(|v| snap(v / pivot));
    let mut out = snapped / snapped.norm();
    let sign = if out[(2, 2)] != 0.0 {
        out[(2, 2)]
    } else {
        // Row-major scan for the first nonzero entry.
        (0..9).map(|i| out[(i / 3, i % 3)]).find(|v| *v != 0.0)?
    };
    if sign < 0.0 {
        out = -out;
    }
    Some(out)
}

impl Homography {
    pub fn identity() -> Self {
        Self::from_matrix(Matrix3::identity()).expect("identity is invertible")
    }

    /// Normalises `m` and checks it has full rank.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, HomogError> {
        let m = canonicalize(&m).ok_or(HomogError::Singular { det: 0.0 })?;
        let det = m.determinant();
        if !(det.abs() > MIN_DET) {
            return Err(HomogError::Singular { det });
        }
        let inv = m.try_inverse().ok_or(HomogError::Singular { det })?;
        let inv = canonicalize(&inv).ok_or(HomogError::Singular { det })?;
        Ok(Self { m, inv })
    }

    /// Row-major `h11 .. h33`.
    pub fn from_row_major(h: [f64; 9]) -> Result<Self, HomogError> {
        Self::from_matrix(Matrix3::from_row_slice(&h))
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_row_major([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0]).expect("translation is invertible")
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn inverse(&self) -> Homography {
        Homography { m: self.inv, inv: self.m }
    }

    pub fn apply_homogeneous(&self, p: CameraPoint) -> HomogeneousPoint {
        let r = self.m * Vector3::new(p.u, p.v, 1.0);
        HomogeneousPoint { xt: r.x, yt: r.y, w: r.z }
    }

    /// Camera pixel -> ortho pixel.
    pub fn project(&self, p: CameraPoint) -> Result<OrthoPoint, HomogError> {
        let (x, y) = self.apply_homogeneous(p).dehomogenize()?;
        Ok(OrthoPoint::new(x, y))
    }

    /// Ortho pixel -> camera pixel.
    pub fn project_inverse(&self, p: OrthoPoint) -> Result<CameraPoint, HomogError> {
        let r = self.inv * Vector3::new(p.x, p.y, 1.0);
        let (u, v) = HomogeneousPoint { xt: r.x, yt: r.y, w: r.z }.dehomogenize()?;
        Ok(CameraPoint::new(u, v))
    }

    /// Forward plus backward squared reprojection error in px². Horizon
    /// crossings return `f64::INFINITY` so callers treat them as outliers.
    pub fn symmetric_transfer_error(&self, pair: &CorrespondencePair) -> f64 {
        let fwd = match self.project(pair.cam) {
            Ok(p) => p,
            Err(_) => return f64::INFINITY,
        };
        let bwd = match self.project_inverse(pair.ortho) {
            Ok(p) => p,
            Err(_) => return f64::INFINITY,
        };
        let e = (fwd.x - pair.ortho.x).powi(2) + (fwd.y - pair.ortho.y).powi(2) + (bwd.u - pair.cam.u).powi(2) + (bwd.v - pair.cam.v).powi(2);
        if e.is_finite() {
            e
        } else {
            f64::INFINITY
        }
    }

    /// Largest elementwise difference between two canonical matrices.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.m - other.m).amax()
    }
}

impl Serialize for Homography {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let h = <[f64; 9]>::deserialize(deserializer)?;
        Homography::from_row_major(h).map_err(serde::de::Error::custom)
    }
}
