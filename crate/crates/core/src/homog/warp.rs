use image::{Rgb, RgbImage, Rgba, RgbaImage};

use super::{HomogError, Homography};
use crate::geom::OrthoPoint;

// Slack for inverse-mapped coordinates that land a rounding error outside
// the frame edge.
const EDGE_EPS: f64 = 1e-9;

fn bilinear(src: &RgbImage, u: f64, v: f64) -> Option<Rgba<u8>> {
    let (w, h) = (src.width() as f64, src.height() as f64);
    if !(u >= -EDGE_EPS && v >= -EDGE_EPS && u <= w - 1.0 + EDGE_EPS && v <= h - 1.0 + EDGE_EPS) {
        return None;
    }
    let u = u.clamp(0.0, w - 1.0);
    let v = v.clamp(0.0, h - 1.0);
    let x0 = u.floor() as u32;
    let y0 = v.floor() as u32;
    let x1 = (x0 + 1).min(src.width() - 1);
    let y1 = (y0 + 1).min(src.height() - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let Rgb(p00) = *src.get_pixel(x0, y0);
    let Rgb(p10) = *src.get_pixel(x1, y0);
    let Rgb(p01) = *src.get_pixel(x0, y1);
    let Rgb(p11) = *src.get_pixel(x1, y1);
    let mut out = [0u8, 0, 0, 255];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    Some(Rgba(out))
}

/// Renders the camera frame into ortho pixel space by inverse mapping each
/// target pixel. Pixels that fall outside the camera frame, or on the
/// horizon, are fully transparent.
pub fn warp_image(h: &Homography, camera_frame: &RgbImage, target: (u32, u32)) -> Result<RgbaImage, HomogError> {
    let det = h.matrix().determinant();
    if !(det.abs() > super::MIN_DET) {
        return Err(HomogError::Singular { det });
    }
    let mut out = RgbaImage::from_pixel(target.0, target.1, Rgba([0, 0, 0, 0]));
    for (x, y, px) in out.enumerate_pixels_mut() {
        if let Ok(cam) = h.project_inverse(OrthoPoint::new(x as f64, y as f64)) {
            if let Some(value) = bilinear(camera_frame, cam.u, cam.v) {
                *px = value;
            }
        }
    }
    Ok(out)
}

/// Alpha-blends a warped frame over the orthoimage at `opacity` in `[0, 1]`.
pub fn composite_overlay(ortho: &RgbImage, warped: &RgbaImage, opacity: f64) -> RgbImage {
    let opacity = opacity.clamp(0.0, 1.0);
    let mut out = ortho.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if x >= warped.width() || y >= warped.height() {
            continue;
        }
        let Rgba(w) = *warped.get_pixel(x, y);
        let a = opacity * w[3] as f64 / 255.0;
        for c in 0..3 {
            px[c] = (px[c] as f64 * (1.0 - a) + w[c] as f64 * a).round() as u8;
        }
    }
    out
}
