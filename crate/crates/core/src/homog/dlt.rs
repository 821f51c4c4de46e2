use nalgebra::{DMatrix, Matrix3};

use super::{HomogError, Homography};
use crate::correspond::CorrespondencePair;

/// Collinearity / rank tolerance, applied in normalised coordinates.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// A normalising similarity and the points it produces.
type Normalized = (Matrix3<f64>, Vec<(f64, f64)>);

/// Similarity that moves the centroid to the origin and makes the mean
/// distance from it `sqrt(2)`. Returns the transform and transformed points.
fn hartley_normalize(points: &[(f64, f64)]) -> Result<Normalized, HomogError> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_dist = points.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    if !(mean_dist.is_finite() && mean_dist > 0.0) {
        return Err(HomogError::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = points.iter().map(|p| (s * (p.0 - cx), s * (p.1 - cy))).collect();
    Ok((t, out))
}

fn cross(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn has_collinear_triple(points: &[(f64, f64)]) -> bool {
    let n = points.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if cross(points[i], points[j], points[k]).abs() < DEGENERACY_TOL {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalised direct linear transform over all `pairs`.
///
/// For the minimal 4-pair case any collinear triple (in either image) is
/// rejected. Larger sets are rejected when the solution is not unique or
/// the fitted matrix is singular.
pub fn estimate_dlt(pairs: &[CorrespondencePair]) -> Result<Homography, HomogError> {
    let n = pairs.len();
    if n < 4 {
        return Err(HomogError::TooFewPairs { needed: 4, got: n });
    }
    if pairs.iter().any(|p| !p.cam.is_finite() || !p.ortho.is_finite()) {
        return Err(HomogError::Degenerate("non-finite coordinates".into()));
    }
    let cam: Vec<(f64, f64)> = pairs.iter().map(|p| (p.cam.u, p.cam.v)).collect();
    let ortho: Vec<(f64, f64)> = pairs.iter().map(|p| (p.ortho.x, p.ortho.y)).collect();
    let (t_cam, cam_n) = hartley_normalize(&cam)?;
    let (t_ortho, ortho_n) = hartley_normalize(&ortho)?;

    if n == 4 && (has_collinear_triple(&cam_n) || has_collinear_triple(&ortho_n)) {
        return Err(HomogError::Degenerate("three of the four points are collinear".into()));
    }

    // Pad to at least 9 rows so the thin SVD exposes the full right null space.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (&(u, v), &(x, y))) in cam_n.iter().zip(ortho_n.iter()).enumerate() {
        let r0 = 2 * i;
        let r1 = r0 + 1;
        a[(r0, 0)] = -u;
        a[(r0, 1)] = -v;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = x * u;
        a[(r0, 7)] = x * v;
        a[(r0, 8)] = x;
        a[(r1, 3)] = -u;
        a[(r1, 4)] = -v;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = y * u;
        a[(r1, 7)] = y * v;
        a[(r1, 8)] = y;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| HomogError::Degenerate("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = order[0];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if second <= DEGENERACY_TOL * largest {
        return Err(HomogError::Degenerate("solution is not unique".into()));
    }

    let h = v_t.row(smallest);
    let h_norm = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_ortho_inv = t_ortho
        .try_inverse()
        .ok_or_else(|| HomogError::Degenerate("normalisation not invertible".into()))?;
    let m = t_ortho_inv * h_norm * t_cam;
    Homography::from_matrix(m).map_err(|e| match e {
        HomogError::Singular { det } => HomogError::Degenerate(format!("fitted homography is singular (det = {det:e})")),
        other => other,
    })
}
