//! Report products over braking events.
//!
//! All products are plain data with a fixed row and column order so that
//! rendering the same events twice yields byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, Timelike};
use serde::{Deserialize, Serialize};

use crate::braking::{BrakingEvent, Severity};
use crate::geom::{OrthoPoint, WorldPoint};
use crate::ortho::GeoTransform;
use crate::stats;
use crate::time::Timestamp;

/// Daytime window used for the hourly tables, inclusive hour buckets
/// (07:00 through 18:59).
pub const DAY_HOURS: std::ops::RangeInclusive<u32> = 7..=18;

#[derive(Debug, thiserror::Error)]
pub enum AnalyticsError {
    #[error("no events")]
    Empty,
    #[error("invalid distance bins: {0}")]
    Bins(String),
    #[error("invalid observation window: {0}")]
    Window(String),
    #[error("unknown product '{0}'")]
    UnknownProduct(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Which (local date, hour) slots were actually recorded. Average counts
/// divide by the number of observed days per hour.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservedHours {
    slots: BTreeMap<u32, BTreeSet<NaiveDate>>,
}

impl ObservedHours {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every day in `[from, to]` observed for every hour in `hours`.
    pub fn from_date_range(from: NaiveDate, to: NaiveDate, hours: std::ops::RangeInclusive<u32>) -> Result<Self, AnalyticsError> {
        if from > to {
            return Err(AnalyticsError::Window(format!("{from} is after {to}")));
        }
        if *hours.end() > 23 {
            return Err(AnalyticsError::Window("hours must lie in 0..=23".into()));
        }
        let mut out = Self::new();
        let mut d = from;
        while d <= to {
            for h in hours.clone() {
                out.insert(d, h);
            }
            d += Duration::days(1);
        }
        Ok(out)
    }

    /// Slots touched by recording spans `[start, end)`, in each span's local
    /// time.
    pub fn from_spans(spans: &[(Timestamp, Timestamp)]) -> Self {
        let mut out = Self::new();
        for (start, end) in spans {
            let mut cursor = start.to_datetime();
            let stop = end.to_datetime();
            while cursor < stop {
                out.insert(cursor.date_naive(), cursor.hour());
                let next_hour = cursor
                    .with_minute(0)
                    .and_then(|c| c.with_second(0))
                    .and_then(|c| c.with_nanosecond(0))
                    .expect("valid truncation")
                    + Duration::hours(1);
                cursor = next_hour;
            }
        }
        out
    }

    pub fn insert(&mut self, date: NaiveDate, hour: u32) {
        self.slots.entry(hour).or_default().insert(date);
    }

    pub fn contains(&self, date: NaiveDate, hour: u32) -> bool {
        self.slots.get(&hour).is_some_and(|d| d.contains(&date))
    }

    pub fn days(&self, hour: u32) -> usize {
        self.slots.get(&hour).map_or(0, |d| d.len())
    }

    pub fn hours(&self) -> impl Iterator<Item = u32> + '_ {
        self.slots.iter().filter(|(_, d)| !d.is_empty()).map(|(h, _)| *h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyCountRow {
    pub hour: u32,
    pub observed_days: usize,
    pub mild: f64,
    pub moderate: f64,
    pub severe: f64,
}

impl HourlyCountRow {
    pub fn get(&self, s: Severity) -> f64 {
        match s {
            Severity::Mild => self.mild,
            Severity::Moderate => self.moderate,
            Severity::Severe => self.severe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyCounts {
    pub rows: Vec<HourlyCountRow>,
    /// Events whose start fell in a slot that is not marked observed.
    pub unobserved_events: usize,
}

/// Mean daily event count per local hour and severity, bucketed by
/// `t_start`.
pub fn hourly_counts(events: &[BrakingEvent], observed: &ObservedHours) -> HourlyCounts {
    let mut raw: BTreeMap<(u32, Severity), usize> = BTreeMap::new();
    let mut unobserved = 0;
    for e in events {
        let (date, hour) = (e.t_start.local_date(), e.t_start.local_hour());
        if observed.contains(date, hour) {
            *raw.entry((hour, e.severity)).or_default() += 1;
        } else {
            unobserved += 1;
        }
    }
    let rows = observed
        .hours()
        .map(|hour| {
            let days = observed.days(hour);
            let avg = |s| raw.get(&(hour, s)).copied().unwrap_or(0) as f64 / days as f64;
            HourlyCountRow {
                hour,
                observed_days: days,
                mild: avg(Severity::Mild),
                moderate: avg(Severity::Moderate),
                severe: avg(Severity::Severe),
            }
        })
        .collect();
    HourlyCounts {
        rows,
        unobserved_events: unobserved,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBins {
    /// Strictly increasing; the last bin is unbounded above.
    pub edges: Vec<f64>,
}

impl Default for DistanceBins {
    fn default() -> Self {
        Self {
            edges: vec![0.0, 15.0, 30.0, 45.0],
        }
    }
}

impl DistanceBins {
    pub fn new(edges: Vec<f64>) -> Result<Self, AnalyticsError> {
        if edges.is_empty() {
            return Err(AnalyticsError::Bins("need at least one edge".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(AnalyticsError::Bins("edges must be finite and strictly increasing".into()));
        }
        Ok(Self { edges })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Half-open `[lo, hi)` bins; values below the first edge go to bin 0.
    pub fn index(&self, r: f64) -> usize {
        self.edges.iter().skip(1).take_while(|&&e| r >= e).count()
    }

    pub fn labels(&self) -> Vec<String> {
        let n = self.edges.len();
        (0..n)
            .map(|i| match self.edges.get(i + 1) {
                Some(hi) => format!("{}-{}", self.edges[i], hi),
                None => format!("{}+", self.edges[i]),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTable {
    pub rows: Vec<Severity>,
    pub cols: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    /// Row-normalised proportions.
    pub values: Vec<Vec<f64>>,
    /// `true` for rows without events, which are all zeros.
    pub empty_rows: Vec<bool>,
}

pub fn severity_distance_heatmap(events: &[BrakingEvent], bins: &DistanceBins) -> HeatmapTable {
    let mut counts = vec![vec![0usize; bins.len()]; Severity::ALL.len()];
    for e in events {
        counts[e.severity as usize][bins.index(e.r_start)] += 1;
    }
    let values = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
        })
        .collect();
    HeatmapTable {
        rows: Severity::ALL.to_vec(),
        cols: bins.labels(),
        empty_rows: counts.iter().map(|r| r.iter().all(|&c| c == 0)).collect(),
        counts,
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyStatsRow {
    pub hour: u32,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyStats {
    pub rows: Vec<HourlyStatsRow>,
    /// Hours in the window with no events; their rows are omitted.
    pub empty_hours: Vec<u32>,
}

/// Per-hour summary of `a_bar` over the given local hours.
pub fn hourly_stats(events: &[BrakingEvent], hours: std::ops::RangeInclusive<u32>) -> HourlyStats {
    let mut by_hour: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for e in events {
        let h = e.t_start.local_hour();
        if hours.contains(&h) {
            by_hour.entry(h).or_default().push(e.a_bar);
        }
    }
    let mut rows = Vec::new();
    let mut empty_hours = Vec::new();
    for hour in hours {
        let Some(values) = by_hour.get(&hour) else {
            empty_hours.push(hour);
            continue;
        };
        let sorted = stats::sorted_copy(values);
        let q = |p| stats::quantile_sorted(&sorted, p).expect("non-empty");
        rows.push(HourlyStatsRow {
            hour,
            n: sorted.len(),
            mean: stats::mean(&sorted).expect("non-empty"),
            min: sorted[0],
            p25: q(0.25),
            p50: q(0.50),
            p75: q(0.75),
            p90: q(0.90),
        });
    }
    HourlyStats { rows, empty_hours }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ecdf {
    /// Ascending r_start values, m.
    pub samples: Vec<f64>,
    pub p95: f64,
}

impl Ecdf {
    /// Fraction of samples `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.samples.partition_point(|&s| s <= x);
        k as f64 / self.samples.len() as f64
    }

    /// `(value, cumulative fraction)` at each sample, for plotting.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let n = self.samples.len() as f64;
        self.samples.iter().enumerate().map(|(i, &s)| (s, (i + 1) as f64 / n)).collect()
    }
}

pub fn rstart_ecdf(events: &[BrakingEvent]) -> Result<Ecdf, AnalyticsError> {
    if events.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let samples = stats::sorted_copy(&events.iter().map(|e| e.r_start).collect::<Vec<_>>());
    let p95 = stats::quantile_sorted(&samples, 0.95).expect("non-empty");
    Ok(Ecdf { samples, p95 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub track_id: i64,
    pub px: OrthoPoint,
    pub severity: Severity,
}

/// Event mean positions in ortho pixel coordinates.
pub fn event_scatter(events: &[BrakingEvent], gt: &GeoTransform) -> Vec<ScatterPoint> {
    let k = gt.metres_per_unit().unwrap_or(1.0);
    events
        .iter()
        .map(|e| ScatterPoint {
            track_id: e.track_id,
            px: gt.world_to_pixel(WorldPoint::new(e.mean_position.easting / k, e.mean_position.northing / k)),
            severity: e.severity,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format '{other}' (expected csv or json)")),
        }
    }
}

/// A rendered-ready product.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Product {
    HourlyCounts(HourlyCounts),
    Heatmap(HeatmapTable),
    HourlyStats(HourlyStats),
    RstartEcdf(Ecdf),
    Scatter(Vec<ScatterPoint>),
}

pub const PRODUCT_NAMES: [&str; 5] = ["hourly-counts", "heatmap", "hourly-stats", "rstart-ecdf", "scatter"];

impl Product {
    pub fn name(&self) -> &'static str {
        match self {
            Product::HourlyCounts(_) => "hourly-counts",
            Product::Heatmap(_) => "heatmap",
            Product::HourlyStats(_) => "hourly-stats",
            Product::RstartEcdf(_) => "rstart-ecdf",
            Product::Scatter(_) => "scatter",
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("products serialise");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> Result<String, AnalyticsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        match self {
            Product::HourlyCounts(c) => {
                w.write_record(["hour", "observed_days", "mild", "moderate", "severe"])?;
                for r in &c.rows {
                    w.write_record([r.hour.to_string(), r.observed_days.to_string(), num(r.mild), num(r.moderate), num(r.severe)])?;
                }
            }
            Product::Heatmap(h) => {
                let mut header = vec!["severity".to_string(), "empty".to_string()];
                header.extend(h.cols.iter().cloned());
                w.write_record(&header)?;
                for (i, s) in h.rows.iter().enumerate() {
                    let mut rec = vec![s.to_string(), h.empty_rows[i].to_string()];
                    rec.extend(h.values[i].iter().map(|v| num(*v)));
                    w.write_record(&rec)?;
                }
            }
            Product::HourlyStats(s) => {
                w.write_record(["hour", "n", "mean", "min", "p25", "p50", "p75", "p90"])?;
                for r in &s.rows {
                    w.write_record([
                        r.hour.to_string(),
                        r.n.to_string(),
                        num(r.mean),
                        num(r.min),
                        num(r.p25),
                        num(r.p50),
                        num(r.p75),
                        num(r.p90),
                    ])?;
                }
            }
            Product::RstartEcdf(e) => {
                w.write_record(["r_start", "ecdf", "p95"])?;
                for (x, f) in e.steps() {
                    w.write_record([num(x), num(f), num(e.p95)])?;
                }
            }
            Product::Scatter(points) => {
                w.write_record(["track_id", "x", "y", "severity"])?;
                for p in points {
                    w.write_record([p.track_id.to_string(), num(p.px.x), num(p.px.y), p.severity.to_string()])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| AnalyticsError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn render(&self, format: ReportFormat) -> Result<String, AnalyticsError> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => Ok(self.to_json()),
        }
    }
}

// Shortest representation that round-trips, so output is stable.
fn num(v: f64) -> String {
    format!("{v}")
}

/// Inputs shared by all products.
pub struct ReportInputs<'a> {
    pub events: &'a [BrakingEvent],
    pub observed: &'a ObservedHours,
    pub bins: &'a DistanceBins,
    pub geotransform: Option<&'a GeoTransform>,
}

/// Builds one product by name. Underscores are accepted in place of hyphens.
pub fn build_product(name: &str, inputs: &ReportInputs<'_>) -> Result<Product, AnalyticsError> {
    Ok(match name.replace('_', "-").as_str() {
        "hourly-counts" => Product::HourlyCounts(hourly_counts(inputs.events, inputs.observed)),
        "heatmap" => Product::Heatmap(severity_distance_heatmap(inputs.events, inputs.bins)),
        "hourly-stats" => Product::HourlyStats(hourly_stats(inputs.events, DAY_HOURS)),
        "rstart-ecdf" => Product::RstartEcdf(rstart_ecdf(inputs.events)?),
        "scatter" => match inputs.geotransform {
            Some(gt) => Product::Scatter(event_scatter(inputs.events, gt)),
            None => return Err(AnalyticsError::UnknownProduct("scatter (site has no geotransform)".into())),
        },
        _ => return Err(AnalyticsError::UnknownProduct(name.to_string())),
    })
}

/// Writes each product to `dir/<name>.<ext>` and returns the paths.
pub fn emit_report(products: &[Product], format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>, AnalyticsError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(products.len());
    for p in products {
        let path = dir.join(format!("{}.{}", p.name(), format.extension()));
        std::fs::write(&path, p.render(format)?)?;
        paths.push(path);
    }
    Ok(paths)
}
