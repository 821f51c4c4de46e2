//! Append-only file store for trajectories, braking events and site records.
//!
//! # Layout
//!
//! ```text
//! <root>/
//!   LOCK                                  held exclusively by the single writer
//!   trajectories/seg-000001.ndjson ...    append-only segments
//!   events/seg-000001.ndjson ...
//!   sites/<site_id>/site.json             site record, replaced atomically
//!   sites/<site_id>/...                   site assets (pairs, frames, ortho)
//! ```
//!
//! # Segment format
//!
//! UTF-8, one JSON object per line, each terminated by `\n`. Every line is
//! a [`Record`] tagged by `"op"`:
//!
//! * `{"op":"put_trajectory", ...TrajectoryRow}` replaces the row for its
//!   `(site_id, video_id, track_id)` key.
//! * `{"op":"put_events","site_id":..,"video_id":..,"track_id":..,"events":[..]}`
//!   replaces every event of that track (an empty list clears them).
//! * `{"op":"clear_video","site_id":..,"video_id":..}` drops every row of
//!   one video in the segment's table; written before a re-ingest.
//!
//! Segments are replayed in file-name order, lines in file order, to rebuild
//! the in-memory index on open. Each writer session appends to a fresh
//! segment, so closed segments never change. A final line without its
//! newline is the remnant of an interrupted write: it is ignored with a
//! warning and the writer truncates it away. Any other unparsable line is
//! reported as corruption.
//!
//! # Analytic-database sink
//!
//! [`Store::export_ndjson`] writes bare rows (no `"op"`) whose fields match
//! [`CLICKHOUSE_DDL`], so exports load with `INSERT ... FORMAT JSONEachRow`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::braking::{BrakingEvent, Severity};
use crate::correspond::{CorrespondenceSet, SiteAnnotations};
use crate::homog::HomographyRecord;
use crate::ortho::{BoundingBoxGeo, GeoTransform};
use crate::time::Timestamp;
use crate::tracks::Trajectory;

/// Table definitions for the analytic-database sink. This schema is our own;
/// column names and order match the exported NDJSON rows.
pub const CLICKHOUSE_DDL: &str = "\
CREATE TABLE IF NOT EXISTS trajectories (
    site_id     LowCardinality(String),
    video_id    String,
    track_id    Int64,
    class       LowCardinality(String),
    point_count UInt32,
    t_first     DateTime64(6),
    t_last      DateTime64(6),
    points      Tuple(t Array(Float64), x Array(Float64), y Array(Float64))
) ENGINE = MergeTree ORDER BY (site_id, video_id, track_id);

CREATE TABLE IF NOT EXISTS events (
    site_id       LowCardinality(String),
    track_id      Int64,
    video_id      String,
    t_start       DateTime64(6),
    t_end         DateTime64(6),
    duration      Float64,
    a_bar         Float64,
    a_robust      Float64,
    r_start       Float64,
    mean_position Tuple(easting Float64, northing Float64),
    severity      Enum8('mild' = 1, 'moderate' = 2, 'severe' = 3),
    peak_decel    Float64
) ENGINE = MergeTree ORDER BY (site_id, t_start, track_id);
";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store at {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("store is open read-only")]
    ReadOnly,
    #[error("conflicting rows for keys: {0:?}")]
    Conflict(Vec<String>),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("corrupt segment {path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("invalid site id '{0}'")]
    SiteId(String),
    #[error("unknown site '{0}'")]
    UnknownSite(String),
    #[error("invalid range: {0}")]
    Range(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Table {
    Trajectories,
    Events,
    Sites,
}

impl Table {
    fn dir(&self) -> &'static str {
        match self {
            Table::Trajectories => "trajectories",
            Table::Events => "events",
            Table::Sites => "sites",
        }
    }
}

impl std::str::FromStr for Table {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trajectories" => Ok(Table::Trajectories),
            "events" => Ok(Table::Events),
            "sites" => Ok(Table::Sites),
            other => Err(format!("unknown table '{other}'")),
        }
    }
}

/// Columnar world-metre samples of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointsBlob {
    /// Epoch seconds.
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRow {
    pub site_id: String,
    pub video_id: String,
    pub track_id: i64,
    pub class: String,
    pub point_count: u32,
    pub t_first: Timestamp,
    pub t_last: Timestamp,
    pub points: PointsBlob,
}

impl TrajectoryRow {
    pub fn from_trajectory(site_id: &str, traj: &Trajectory, offset_s: i32) -> Result<Self, StoreError> {
        let (Some(first), Some(last)) = (traj.points.first(), traj.points.last()) else {
            return Err(StoreError::Schema(format!("track {} has no points", traj.track_id)));
        };
        Ok(Self {
            site_id: site_id.to_string(),
            video_id: traj.video_id.clone(),
            track_id: traj.track_id,
            class: traj.class_label.clone(),
            point_count: traj.points.len() as u32,
            t_first: Timestamp::from_epoch_seconds(first.t, offset_s),
            t_last: Timestamp::from_epoch_seconds(last.t, offset_s),
            points: PointsBlob {
                t: traj.points.iter().map(|p| p.t).collect(),
                x: traj.points.iter().map(|p| p.world.easting).collect(),
                y: traj.points.iter().map(|p| p.world.northing).collect(),
            },
        })
    }

    fn key(&self) -> Key {
        (self.site_id.clone(), self.video_id.clone(), self.track_id)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        validate_site_id(&self.site_id)?;
        let n = self.point_count as usize;
        if self.points.t.len() != n || self.points.x.len() != n || self.points.y.len() != n {
            return Err(StoreError::Schema(format!(
                "track {}: point_count {} does not match points arrays",
                self.track_id, self.point_count
            )));
        }
        Ok(())
    }
}

/// A braking event tagged with its site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub site_id: String,
    #[serde(flatten)]
    pub event: BrakingEvent,
}

/// Site configuration and georeferencing; never imagery.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBoxGeo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geotransform: Option<GeoTransform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<SiteAnnotations>,
    #[serde(default)]
    pub homographies: Vec<HomographyRecord>,
}

const PAIRS_FILE: &str = "pairs.json";

/// Images kept alongside a site record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteAsset {
    /// A representative camera frame, for pairing and overlays.
    CameraFrame,
    Ortho,
}

impl SiteAsset {
    fn file_name(self) -> &'static str {
        match self {
            SiteAsset::CameraFrame => "camera.png",
            SiteAsset::Ortho => "ortho.png",
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

type Key = (String, String, i64);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Record {
    PutTrajectory(TrajectoryRow),
    PutEvents {
        site_id: String,
        video_id: String,
        track_id: i64,
        events: Vec<BrakingEvent>,
    },
    ClearVideo {
        site_id: String,
        video_id: String,
    },
}

pub fn validate_site_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(StoreError::SiteId(id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StoreStats {
    pub trajectories: usize,
    pub events: usize,
    pub sites: usize,
    /// Partial trailing lines skipped while opening.
    pub recovered_partial_lines: usize,
}

/// Query filter for events; all set conditions must hold.
#[derive(Debug, Clone, Default)]
pub struct EventQuery {
    pub site_id: String,
    /// Inclusive lower bound on `t_start`.
    pub t_from: Option<Timestamp>,
    /// Exclusive upper bound on `t_start`.
    pub t_to: Option<Timestamp>,
    pub severity: Option<Severity>,
    pub video_id: Option<String>,
}

impl EventQuery {
    pub fn site(site_id: impl Into<String>) -> Self {
        Self {
            site_id: site_id.into(),
            ..Default::default()
        }
    }
}

pub struct Store {
    root: PathBuf,
    writable: bool,
    _lock: Option<File>,
    trajectories: BTreeMap<Key, TrajectoryRow>,
    events: BTreeMap<Key, Vec<BrakingEvent>>,
    segments: BTreeMap<&'static str, PathBuf>,
    recovered: usize,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).field("writable", &self.writable).finish()
    }
}

fn segment_files(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("seg-") && n.ends_with(".ndjson"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn next_segment(dir: &Path) -> Result<PathBuf, StoreError> {
    let last = segment_files(dir)?
        .last()
        .and_then(|p| p.file_stem()?.to_str()?.strip_prefix("seg-")?.parse::<u64>().ok())
        .unwrap_or(0);
    Ok(dir.join(format!("seg-{:06}.ndjson", last + 1)))
}

impl Store {
    /// Opens (creating if needed) as the single writer.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        for t in [Table::Trajectories, Table::Events, Table::Sites] {
            fs::create_dir_all(root.join(t.dir()))?;
        }
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(root.join("LOCK"))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(root)),
            Err(fs::TryLockError::Error(e)) => return Err(e.into()),
        }
        let mut store = Self::empty(root, true, Some(lock));
        store.replay()?;
        Ok(store)
    }

    /// Opens for queries only; no lock is taken and nothing is repaired.
    pub fn open_read_only(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let mut store = Self::empty(root.as_ref().to_path_buf(), false, None);
        store.replay()?;
        Ok(store)
    }

    fn empty(root: PathBuf, writable: bool, lock: Option<File>) -> Self {
        Self {
            root,
            writable,
            _lock: lock,
            trajectories: BTreeMap::new(),
            events: BTreeMap::new(),
            segments: BTreeMap::new(),
            recovered: 0,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn replay(&mut self) -> Result<(), StoreError> {
        for table in [Table::Trajectories, Table::Events] {
            for path in segment_files(&self.root.join(table.dir()))? {
                self.replay_segment(table, &path)?;
            }
        }
        Ok(())
    }

    fn replay_segment(&mut self, table: Table, path: &Path) -> Result<(), StoreError> {
        let bytes = fs::read(path)?;
        let complete_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete_len < bytes.len() {
            tracing::warn!(path = %path.display(), bytes = bytes.len() - complete_len, "ignoring partial final record");
            self.recovered += 1;
            if self.writable {
                OpenOptions::new().write(true).open(path)?.set_len(complete_len as u64)?;
            }
        }
        let text = std::str::from_utf8(&bytes[..complete_len]).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            self.apply(table, rec);
        }
        Ok(())
    }

    fn apply(&mut self, table: Table, rec: Record) {
        match rec {
            Record::PutTrajectory(row) => {
                self.trajectories.insert(row.key(), row);
            }
            Record::PutEvents {
                site_id,
                video_id,
                track_id,
                events,
            } => {
                let key = (site_id, video_id, track_id);
                if events.is_empty() {
                    self.events.remove(&key);
                } else {
                    self.events.insert(key, events);
                }
            }
            Record::ClearVideo { site_id, video_id } => {
                let same = |k: &Key| k.0 == site_id && k.1 == video_id;
                match table {
                    Table::Trajectories => self.trajectories.retain(|k, _| !same(k)),
                    Table::Events => self.events.retain(|k, _| !same(k)),
                    Table::Sites => {}
                }
            }
        }
    }

    fn append(&mut self, table: Table, records: Vec<Record>) -> Result<(), StoreError> {
        if !self.writable {
            return Err(StoreError::ReadOnly);
        }
        if records.is_empty() {
            return Ok(());
        }
        let dir = self.root.join(table.dir());
        let path = match self.segments.get(table.dir()) {
            Some(p) => p.clone(),
            None => {
                let p = next_segment(&dir)?;
                self.segments.insert(table.dir(), p.clone());
                p
            }
        };
        let mut buf = Vec::new();
        for r in &records {
            serde_json::to_writer(&mut buf, r).expect("records serialise");
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        f.write_all(&buf)?;
        f.sync_data()?;
        for r in records {
            self.apply(table, r);
        }
        Ok(())
    }

    /// Stores trajectory rows; an existing row with the same key is replaced.
    /// Two rows with one key but different content in the same batch are a
    /// conflict and nothing is written.
    pub fn put_trajectories(&mut self, batch: &[TrajectoryRow]) -> Result<usize, StoreError> {
        let mut seen: BTreeMap<Key, &TrajectoryRow> = BTreeMap::new();
        let mut conflicts = BTreeSet::new();
        for row in batch {
            row.validate()?;
            if let Some(prev) = seen.insert(row.key(), row) {
                if prev != row {
                    conflicts.insert(format!("{}/{}/{}", row.site_id, row.video_id, row.track_id));
                }
            }
        }
        if !conflicts.is_empty() {
            return Err(StoreError::Conflict(conflicts.into_iter().collect()));
        }
        let n = seen.len();
        let records = seen.into_values().map(|r| Record::PutTrajectory(r.clone())).collect();
        self.append(Table::Trajectories, records)?;
        Ok(n)
    }

    /// Stores events grouped by track; each track's previous events are
    /// replaced. An event listed twice in one batch is stored once.
    pub fn put_events(&mut self, site_id: &str, batch: &[BrakingEvent]) -> Result<usize, StoreError> {
        validate_site_id(site_id)?;
        let mut groups: BTreeMap<Key, Vec<BrakingEvent>> = BTreeMap::new();
        for e in batch {
            let g = groups.entry((site_id.to_string(), e.video_id.clone(), e.track_id)).or_default();
            if !g.contains(e) {
                g.push(e.clone());
            }
        }
        let n = groups.values().map(Vec::len).sum();
        let records = groups
            .into_iter()
            .map(|((site_id, video_id, track_id), events)| Record::PutEvents {
                site_id,
                video_id,
                track_id,
                events,
            })
            .collect();
        self.append(Table::Events, records)?;
        Ok(n)
    }

    /// Replaces everything stored for one video with a fresh ingest result.
    pub fn replace_video(
        &mut self,
        site_id: &str,
        video_id: &str,
        trajectories: &[TrajectoryRow],
        events: &[BrakingEvent],
    ) -> Result<(usize, usize), StoreError> {
        validate_site_id(site_id)?;
        if let Some(bad) = trajectories.iter().find(|r| r.site_id != site_id || r.video_id != video_id) {
            return Err(StoreError::Schema(format!(
                "trajectory row {}/{} outside {site_id}/{video_id}",
                bad.site_id, bad.video_id
            )));
        }
        if let Some(bad) = events.iter().find(|e| e.video_id != video_id) {
            return Err(StoreError::Schema(format!("event for video {} outside {video_id}", bad.video_id)));
        }
        for t in [Table::Trajectories, Table::Events] {
            self.append(
                t,
                vec![Record::ClearVideo {
                    site_id: site_id.to_string(),
                    video_id: video_id.to_string(),
                }],
            )?;
        }
        let nt = self.put_trajectories(trajectories)?;
        let ne = self.put_events(site_id, events)?;
        Ok((nt, ne))
    }

    pub fn known_site(&self, site_id: &str) -> bool {
        self.site_path(site_id).map(|p| p.exists()).unwrap_or(false)
            || self.trajectories.keys().any(|k| k.0 == site_id)
            || self.events.keys().any(|k| k.0 == site_id)
    }

    /// Matching events sorted by `t_start`, then track and video.
    pub fn query_events(&self, q: &EventQuery) -> Result<Vec<EventRow>, StoreError> {
        if let (Some(a), Some(b)) = (&q.t_from, &q.t_to) {
            if a.micros() > b.micros() {
                return Err(StoreError::Range(format!("{a} is after {b}")));
            }
        }
        if !self.known_site(&q.site_id) {
            tracing::warn!(site = %q.site_id, "query for unknown site");
            return Ok(Vec::new());
        }
        let mut out: Vec<EventRow> = self
            .events
            .iter()
            .filter(|(k, _)| k.0 == q.site_id && q.video_id.as_ref().is_none_or(|v| *v == k.1))
            .flat_map(|(k, evs)| {
                evs.iter().map(move |e| EventRow {
                    site_id: k.0.clone(),
                    event: e.clone(),
                })
            })
            .filter(|r| {
                let t = r.event.t_start.micros();
                q.t_from.is_none_or(|f| t >= f.micros()) && q.t_to.is_none_or(|to| t < to.micros()) && q.severity.is_none_or(|s| r.event.severity == s)
            })
            .collect();
        sort_event_rows(&mut out);
        Ok(out)
    }

    /// Trajectories of a site (optionally one video), sorted by key.
    pub fn query_trajectories(&self, site_id: &str, video_id: Option<&str>) -> Vec<TrajectoryRow> {
        self.trajectories
            .iter()
            .filter(|(k, _)| k.0 == site_id && video_id.is_none_or(|v| v == k.1))
            .map(|(_, r)| r.clone())
            .collect()
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            trajectories: self.trajectories.len(),
            events: self.events.values().map(Vec::len).sum(),
            sites: self.list_sites().map(|s| s.len()).unwrap_or(0),
            recovered_partial_lines: self.recovered,
        }
    }

    fn site_path(&self, site_id: &str) -> Result<PathBuf, StoreError> {
        Ok(self.site_dir(site_id)?.join("site.json"))
    }

    /// Directory holding a site's record and assets.
    pub fn site_dir(&self, site_id: &str) -> Result<PathBuf, StoreError> {
        validate_site_id(site_id)?;
        Ok(self.root.join(Table::Sites.dir()).join(site_id))
    }

    pub fn put_site(&mut self, site: &SiteRecord) -> Result<(), StoreError> {
        if !self.writable {
            return Err(StoreError::ReadOnly);
        }
        let dir = self.site_dir(&site.site_id)?;
        fs::create_dir_all(&dir)?;
        let mut text = serde_json::to_string_pretty(site).expect("site serialises");
        text.push('\n');
        write_atomic(&dir.join("site.json"), text.as_bytes())
    }

    pub fn get_site(&self, site_id: &str) -> Result<SiteRecord, StoreError> {
        let path = self.site_path(site_id)?;
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::UnknownSite(site_id.to_string())),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn list_sites(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join(Table::Sites.dir());
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("site.json").exists())
            .filter_map(|e| e.file_name().to_str().map(String::from))
            .collect();
        out.sort();
        Ok(out)
    }

    /// Stores the site's correspondence set as `pairs.json`.
    pub fn put_pairs(&mut self, set: &CorrespondenceSet) -> Result<(), StoreError> {
        if !self.writable {
            return Err(StoreError::ReadOnly);
        }
        set.validate().map_err(|e| StoreError::Schema(e.to_string()))?;
        let dir = self.site_dir(&set.site_id)?;
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(PAIRS_FILE), set.to_json().as_bytes())
    }

    /// The site's correspondence set, or `None` before any pairs were saved.
    pub fn get_pairs(&self, site_id: &str) -> Result<Option<CorrespondenceSet>, StoreError> {
        let path = self.site_dir(site_id)?.join(PAIRS_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => CorrespondenceSet::from_json(&text).map(Some).map_err(|e| StoreError::Corrupt {
                path,
                line: 0,
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Stores a site image as PNG. The ortho also gets a world file, and its
    /// geotransform is copied into the site record.
    pub fn put_image(&mut self, site_id: &str, asset: SiteAsset, pixels: &RgbImage, geotransform: Option<&GeoTransform>) -> Result<(), StoreError> {
        if !self.writable {
            return Err(StoreError::ReadOnly);
        }
        let mut site = self.get_site(site_id)?;
        let path = self.site_dir(site_id)?.join(asset.file_name());
        let mut png = Vec::new();
        pixels
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| StoreError::Schema(e.to_string()))?;
        write_atomic(&path, &png)?;
        if let (SiteAsset::Ortho, Some(gt)) = (asset, geotransform) {
            write_atomic(&crate::ortho::sidecar_path(&path), gt.to_world_file().as_bytes())?;
            site.geotransform = Some(gt.clone());
            self.put_site(&site)?;
        }
        Ok(())
    }

    pub fn get_image(&self, site_id: &str, asset: SiteAsset) -> Result<Option<RgbImage>, StoreError> {
        let path = self.site_dir(site_id)?.join(asset.file_name());
        match fs::read(&path) {
            Ok(bytes) => crate::ortho::decode_rgb(&bytes).map(Some).map_err(|e| StoreError::Corrupt {
                path,
                line: 0,
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Rows of `table` as sink-schema NDJSON, in a fixed order.
    pub fn export_ndjson_string(&self, table: Table, site_id: Option<&str>) -> Result<(String, usize), StoreError> {
        let mut out = String::new();
        let mut n = 0;
        let wanted = |s: &str| site_id.is_none_or(|w| w == s);
        match table {
            Table::Trajectories => {
                for row in self.trajectories.values().filter(|r| wanted(&r.site_id)) {
                    out.push_str(&serde_json::to_string(row).expect("row serialises"));
                    out.push('\n');
                    n += 1;
                }
            }
            Table::Events => {
                let mut rows: Vec<EventRow> = self
                    .events
                    .iter()
                    .filter(|(k, _)| wanted(&k.0))
                    .flat_map(|(k, evs)| {
                        evs.iter().map(move |e| EventRow {
                            site_id: k.0.clone(),
                            event: e.clone(),
                        })
                    })
                    .collect();
                sort_event_rows(&mut rows);
                for row in rows {
                    out.push_str(&serde_json::to_string(&row).expect("row serialises"));
                    out.push('\n');
                    n += 1;
                }
            }
            Table::Sites => {
                for id in self.list_sites()?.into_iter().filter(|s| wanted(s)) {
                    out.push_str(&serde_json::to_string(&self.get_site(&id)?).expect("site serialises"));
                    out.push('\n');
                    n += 1;
                }
            }
        }
        Ok((out, n))
    }

    pub fn export_ndjson(&self, table: Table, path: &Path) -> Result<usize, StoreError> {
        let (text, n) = self.export_ndjson_string(table, None)?;
        fs::write(path, text)?;
        Ok(n)
    }

    /// Loads rows written by [`Store::export_ndjson`].
    pub fn import_ndjson(&mut self, table: Table, path: &Path) -> Result<usize, StoreError> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if !line.trim().is_empty() {
                lines.push((i + 1, line));
            }
        }
        let parse_err = |line: usize, e: serde_json::Error| StoreError::Corrupt {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        };
        match table {
            Table::Trajectories => {
                let rows = lines
                    .iter()
                    .map(|(i, l)| serde_json::from_str::<TrajectoryRow>(l).map_err(|e| parse_err(*i, e)))
                    .collect::<Result<Vec<_>, _>>()?;
                self.put_trajectories(&rows)
            }
            Table::Events => {
                let rows = lines
                    .iter()
                    .map(|(i, l)| serde_json::from_str::<EventRow>(l).map_err(|e| parse_err(*i, e)))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut by_site: BTreeMap<String, Vec<BrakingEvent>> = BTreeMap::new();
                for r in rows {
                    by_site.entry(r.site_id).or_default().push(r.event);
                }
                let mut n = 0;
                for (site, evs) in by_site {
                    n += self.put_events(&site, &evs)?;
                }
                Ok(n)
            }
            Table::Sites => {
                let mut n = 0;
                for (i, l) in &lines {
                    let site: SiteRecord = serde_json::from_str(l).map_err(|e| parse_err(*i, e))?;
                    self.put_site(&site)?;
                    n += 1;
                }
                Ok(n)
            }
        }
    }
}

pub fn sort_event_rows(rows: &mut [EventRow]) {
    rows.sort_by(|a, b| {
        (a.event.t_start.micros(), a.event.track_id, &a.event.video_id, &a.site_id).cmp(&(
            b.event.t_start.micros(),
            b.event.track_id,
            &b.event.video_id,
            &b.site_id,
        ))
    });
}
