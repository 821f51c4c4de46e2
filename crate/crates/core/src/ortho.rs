//! Georeferenced orthoimagery: retrieval from an image-export REST endpoint,
//! world-file sidecars, and pixel <-> world conversion.
//!
//! Pixel coordinates always refer to pixel centres, matching the world-file
//! convention. Rows grow southward, so northing decreases with `y`.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Duration;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geom::{OrthoPoint, WorldPoint};

const FEET_TO_METRES: f64 = 0.3048;

#[derive(Debug, thiserror::Error)]
pub enum OrthoError {
    #[error("invalid bounding box: {0}")]
    InvalidBBox(String),
    #[error("invalid raster size {0}x{1}")]
    InvalidSize(u32, u32),
    #[error("imagery transport error: {0}")]
    Transport(String),
    #[error("imagery service returned HTTP {status}: {body}")]
    Service { status: u16, body: String },
    #[error("cannot decode imagery: {0}")]
    Decode(String),
    #[error("CRS {crs_id} uses {units} units; a linear metric scale is required")]
    Units { crs_id: String, units: CrsUnits },
    #[error("malformed world file: {0}")]
    WorldFile(String),
    #[error("invalid geotransform: {0}")]
    InvalidGeoTransform(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl OrthoError {
    /// Transport failures may succeed on retry; everything else will not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, OrthoError::Transport(_))
    }
}

/// Linear unit of the raster CRS. The CRS identifier itself is opaque.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrsUnits {
    #[default]
    Meters,
    Feet,
    Degrees,
}

impl CrsUnits {
    pub fn metres_per_unit(self) -> Option<f64> {
        match self {
            CrsUnits::Meters => Some(1.0),
            CrsUnits::Feet => Some(FEET_TO_METRES),
            CrsUnits::Degrees => None,
        }
    }
}

impl fmt::Display for CrsUnits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrsUnits::Meters => "meters",
            CrsUnits::Feet => "feet",
            CrsUnits::Degrees => "degrees",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBoxGeo {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
    pub crs_id: String,
}

impl BoundingBoxGeo {
    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64, crs_id: impl Into<String>) -> Result<Self, OrthoError> {
        let bbox = Self {
            min_lon,
            min_lat,
            max_lon,
            max_lat,
            crs_id: crs_id.into(),
        };
        bbox.validate()?;
        Ok(bbox)
    }

    pub fn validate(&self) -> Result<(), OrthoError> {
        let finite = [self.min_lon, self.min_lat, self.max_lon, self.max_lat].iter().all(|v| v.is_finite());
        if !finite {
            return Err(OrthoError::InvalidBBox("non-finite coordinate".into()));
        }
        if self.min_lon >= self.max_lon {
            return Err(OrthoError::InvalidBBox(format!(
                "min_lon {} must be below max_lon {}",
                self.min_lon, self.max_lon
            )));
        }
        if self.min_lat >= self.max_lat {
            return Err(OrthoError::InvalidBBox(format!(
                "min_lat {} must be below max_lat {}",
                self.min_lat, self.max_lat
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.max_lon - self.min_lon
    }

    pub fn height(&self) -> f64 {
        self.max_lat - self.min_lat
    }
}

/// Axis-aligned affine map between ortho pixel centres and CRS coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    /// Easting of the centre of pixel (0, 0).
    pub origin_x: f64,
    /// Northing of the centre of pixel (0, 0).
    pub origin_y: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    pub crs_id: String,
    #[serde(default)]
    pub units: CrsUnits,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, scale_x: f64, scale_y: f64, crs_id: impl Into<String>) -> Result<Self, OrthoError> {
        let gt = Self {
            origin_x,
            origin_y,
            scale_x,
            scale_y,
            crs_id: crs_id.into(),
            units: CrsUnits::Meters,
        };
        gt.validate()?;
        Ok(gt)
    }

    pub fn with_units(mut self, units: CrsUnits) -> Self {
        self.units = units;
        self
    }

    pub fn validate(&self) -> Result<(), OrthoError> {
        if !(self.origin_x.is_finite() && self.origin_y.is_finite()) {
            return Err(OrthoError::InvalidGeoTransform("non-finite origin".into()));
        }
        if !(self.scale_x > 0.0 && self.scale_x.is_finite() && self.scale_y > 0.0 && self.scale_y.is_finite()) {
            return Err(OrthoError::InvalidGeoTransform(format!(
                "scales must be positive, got ({}, {})",
                self.scale_x, self.scale_y
            )));
        }
        Ok(())
    }

    /// Geotransform of a raster of `size` pixels exactly covering `bbox`.
    pub fn from_bbox(bbox: &BoundingBoxGeo, size: (u32, u32)) -> Result<Self, OrthoError> {
        bbox.validate()?;
        let (w, h) = size;
        if w == 0 || h == 0 {
            return Err(OrthoError::InvalidSize(w, h));
        }
        let scale_x = bbox.width() / w as f64;
        let scale_y = bbox.height() / h as f64;
        Self::new(
            bbox.min_lon + scale_x / 2.0,
            bbox.max_lat - scale_y / 2.0,
            scale_x,
            scale_y,
            bbox.crs_id.clone(),
        )
    }

    /// CRS coordinates of an ortho pixel centre.
    pub fn pixel_to_world(&self, p: OrthoPoint) -> WorldPoint {
        WorldPoint::new(self.origin_x + p.x * self.scale_x, self.origin_y - p.y * self.scale_y)
    }

    pub fn world_to_pixel(&self, w: WorldPoint) -> OrthoPoint {
        OrthoPoint::new((w.easting - self.origin_x) / self.scale_x, (self.origin_y - w.northing) / self.scale_y)
    }

    /// Ground sample distance in metres, converting from feet when needed.
    pub fn meters_per_pixel(&self) -> Result<(f64, f64), OrthoError> {
        let k = self.units.metres_per_unit().ok_or_else(|| OrthoError::Units {
            crs_id: self.crs_id.clone(),
            units: self.units,
        })?;
        Ok((self.scale_x * k, self.scale_y * k))
    }

    /// Metres per CRS unit.
    pub fn metres_per_unit(&self) -> Result<f64, OrthoError> {
        self.units.metres_per_unit().ok_or_else(|| OrthoError::Units {
            crs_id: self.crs_id.clone(),
            units: self.units,
        })
    }

    /// Six-line ESRI world file body.
    pub fn to_world_file(&self) -> String {
        format!("{}\n0\n0\n{}\n{}\n{}\n", self.scale_x, -self.scale_y, self.origin_x, self.origin_y)
    }

    /// Parses a world file. Rotation terms must be zero; the CRS is not part
    /// of the format and is supplied by the caller.
    pub fn from_world_file(text: &str, crs_id: impl Into<String>, units: CrsUnits) -> Result<Self, OrthoError> {
        let values: Vec<f64> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.parse::<f64>().map_err(|e| OrthoError::WorldFile(format!("{l:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 6 {
            return Err(OrthoError::WorldFile(format!("expected 6 lines, found {}", values.len())));
        }
        if values[1] != 0.0 || values[2] != 0.0 {
            return Err(OrthoError::WorldFile("rotated rasters are not supported".into()));
        }
        let gt = GeoTransform {
            origin_x: values[4],
            origin_y: values[5],
            scale_x: values[0],
            scale_y: -values[3],
            crs_id: crs_id.into(),
            units,
        };
        gt.validate()?;
        Ok(gt)
    }
}

#[derive(Debug, Clone)]
pub struct OrthoRaster {
    pub pixels: RgbImage,
    pub geotransform: GeoTransform,
    pub source_uri: String,
}

impl OrthoRaster {
    pub fn new(pixels: RgbImage, geotransform: GeoTransform, source_uri: impl Into<String>) -> Result<Self, OrthoError> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(OrthoError::InvalidSize(pixels.width(), pixels.height()));
        }
        geotransform.validate()?;
        Ok(Self {
            pixels,
            geotransform,
            source_uri: source_uri.into(),
        })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// Writes the raster as PNG plus a `.pgw` world file next to it.
    pub fn save(&self, png_path: &Path) -> Result<PathBuf, OrthoError> {
        self.pixels
            .save_with_format(png_path, ImageFormat::Png)
            .map_err(|e| OrthoError::Decode(e.to_string()))?;
        let sidecar = sidecar_path(png_path);
        std::fs::write(&sidecar, self.geotransform.to_world_file())?;
        Ok(sidecar)
    }
}

/// Image export request parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportRequest {
    pub bbox: BoundingBoxGeo,
    pub size: (u32, u32),
    pub format: String,
}

impl ExportRequest {
    /// Query parameters in the order they are sent.
    pub fn query_pairs(&self) -> Vec<(&'static str, String)> {
        let sr = self.bbox.crs_id.rsplit(':').next().unwrap_or(&self.bbox.crs_id).to_string();
        vec![
            (
                "bbox",
                format!("{},{},{},{}", self.bbox.min_lon, self.bbox.min_lat, self.bbox.max_lon, self.bbox.max_lat),
            ),
            ("bboxSR", sr.clone()),
            ("imageSR", sr),
            ("size", format!("{},{}", self.size.0, self.size.1)),
            ("format", self.format.clone()),
            ("f", "image".to_string()),
        ]
    }
}

/// Anything that can return encoded image bytes for an export request.
pub trait ImagerySource: Send + Sync {
    fn fetch(&self, request: &ExportRequest) -> Result<Vec<u8>, OrthoError>;

    fn describe(&self) -> String;
}

/// `GET {endpoint}?bbox=..&bboxSR=..&size=..&format=..` against an
/// ArcGIS-style `exportImage` endpoint.
pub struct HttpImagery {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpImagery {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl ImagerySource for HttpImagery {
    fn fetch(&self, request: &ExportRequest) -> Result<Vec<u8>, OrthoError> {
        let mut req = self.agent.get(&self.endpoint);
        for (k, v) in request.query_pairs() {
            req = req.query(k, &v);
        }
        let mut resp = req.call().map_err(|e| OrthoError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| OrthoError::Transport(e.to_string()))?;
        if status != 200 {
            let text = String::from_utf8_lossy(&body[..body.len().min(512)]).into_owned();
            return Err(OrthoError::Service { status, body: text });
        }
        Ok(body)
    }

    fn describe(&self) -> String {
        self.endpoint.clone()
    }
}

/// Serves one image file for every request; for offline runs and tests.
pub struct FileImagery {
    path: PathBuf,
}

impl FileImagery {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }
}

impl ImagerySource for FileImagery {
    fn fetch(&self, _request: &ExportRequest) -> Result<Vec<u8>, OrthoError> {
        Ok(std::fs::read(&self.path)?)
    }

    fn describe(&self) -> String {
        format!("file://{}", self.path.display())
    }
}

/// Requests an orthoimage covering `bbox` and georeferences it from the
/// request itself. The returned image must have the requested size.
pub fn fetch_ortho(source: &dyn ImagerySource, bbox: &BoundingBoxGeo, size: (u32, u32)) -> Result<OrthoRaster, OrthoError> {
    bbox.validate()?;
    let geotransform = GeoTransform::from_bbox(bbox, size)?;
    let request = ExportRequest {
        bbox: bbox.clone(),
        size,
        format: "png".into(),
    };
    let bytes = source.fetch(&request)?;
    let pixels = decode_rgb(&bytes)?;
    if (pixels.width(), pixels.height()) != size {
        return Err(OrthoError::Decode(format!(
            "requested {}x{} but received {}x{}",
            size.0,
            size.1,
            pixels.width(),
            pixels.height()
        )));
    }
    OrthoRaster::new(pixels, geotransform, source.describe())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, OrthoError> {
    let img = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| OrthoError::Decode(e.to_string()))?
        .decode()
        .map_err(|e| OrthoError::Decode(e.to_string()))?;
    Ok(img.to_rgb8())
}

/// World-file path for an image: `.pgw` for PNG, `.tfw` for TIFF, `.wld`
/// otherwise.
pub fn sidecar_path(image_path: &Path) -> PathBuf {
    let ext = image_path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let sidecar_ext = match ext.as_deref() {
        Some("png") => "pgw",
        Some("tif") | Some("tiff") => "tfw",
        Some("jpg") | Some("jpeg") => "jgw",
        _ => "wld",
    };
    image_path.with_extension(sidecar_ext)
}

/// Loads a PNG/TIFF raster with its world-file sidecar.
pub fn load_raster(image_path: &Path, crs_id: &str, units: CrsUnits) -> Result<OrthoRaster, OrthoError> {
    let bytes = std::fs::read(image_path)?;
    let pixels = decode_rgb(&bytes)?;
    let sidecar = sidecar_path(image_path);
    let text = std::fs::read_to_string(&sidecar)?;
    let gt = GeoTransform::from_world_file(&text, crs_id, units)?;
    OrthoRaster::new(pixels, gt, format!("file://{}", image_path.display()))
}
