use serde::{Deserialize, Serialize};

/// Pixel position in the traffic camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPoint {
    pub u: f64,
    pub v: f64,
}

/// Pixel position in the orthoimage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthoPoint {
    pub x: f64,
    pub y: f64,
}

/// Projected world coordinates in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub easting: f64,
    pub northing: f64,
}

impl CameraPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

impl OrthoPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl WorldPoint {
    pub const fn new(easting: f64, northing: f64) -> Self {
        Self { easting, northing }
    }

    pub fn is_finite(&self) -> bool {
        self.easting.is_finite() && self.northing.is_finite()
    }

    pub fn distance(&self, other: &WorldPoint) -> f64 {
        (self.easting - other.easting).hypot(self.northing - other.northing)
    }
}

/// Closest point on segment `a -> b` to `p`, returned as the parameter `t`
/// in `[0, 1]` and the point itself. A zero-length segment yields `a`.
pub(crate) fn closest_on_segment(p: WorldPoint, a: WorldPoint, b: WorldPoint) -> (f64, WorldPoint) {
    let dx = b.easting - a.easting;
    let dy = b.northing - a.northing;
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return (0.0, a);
    }
    let t = (((p.easting - a.easting) * dx + (p.northing - a.northing) * dy) / len2).clamp(0.0, 1.0);
    (t, WorldPoint::new(a.easting + t * dx, a.northing + t * dy))
}
