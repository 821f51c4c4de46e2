//! Timestamps with a fixed UTC offset.
//!
//! Events are reported in the site's local civil time, so a timestamp keeps
//! the offset it was observed with. The value is held as whole microseconds
//! since the Unix epoch, which makes the ISO-8601 form round-trip exactly.

use std::fmt;

use chrono::{DateTime, FixedOffset, NaiveDate, SecondsFormat, TimeZone, Timelike};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, thiserror::Error)]
#[error("invalid timestamp {input:?}: {reason}")]
pub struct TimestampError {
    input: String,
    reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Timestamp {
    micros: i64,
    offset_s: i32,
}

impl Timestamp {
    pub fn from_micros(micros: i64, offset_s: i32) -> Self {
        Self { micros, offset_s }
    }

    /// Rounds epoch seconds to the nearest microsecond.
    pub fn from_epoch_seconds(secs: f64, offset_s: i32) -> Self {
        Self {
            micros: (secs * 1e6).round() as i64,
            offset_s,
        }
    }

    pub fn parse(input: &str) -> Result<Self, TimestampError> {
        let dt = DateTime::parse_from_rfc3339(input).map_err(|e| TimestampError {
            input: input.to_string(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_datetime(&dt))
    }

    pub fn from_datetime(dt: &DateTime<FixedOffset>) -> Self {
        Self {
            micros: dt.timestamp_micros(),
            offset_s: dt.offset().local_minus_utc(),
        }
    }

    pub fn micros(&self) -> i64 {
        self.micros
    }

    pub fn offset_seconds(&self) -> i32 {
        self.offset_s
    }

    pub fn epoch_seconds(&self) -> f64 {
        self.micros as f64 / 1e6
    }

    pub fn to_datetime(&self) -> DateTime<FixedOffset> {
        let offset = FixedOffset::east_opt(self.offset_s).unwrap_or_else(|| FixedOffset::east_opt(0).unwrap());
        offset.timestamp_micros(self.micros).single().expect("in-range timestamp")
    }

    /// Local clock hour, 0-23.
    pub fn local_hour(&self) -> u32 {
        self.to_datetime().hour()
    }

    pub fn local_date(&self) -> NaiveDate {
        self.to_datetime().date_naive()
    }

    pub fn to_rfc3339(&self) -> String {
        self.to_datetime().to_rfc3339_opts(SecondsFormat::Micros, true)
    }
}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.micros.cmp(&other.micros).then(self.offset_s.cmp(&other.offset_s))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse(&s).map_err(serde::de::Error::custom)
    }
}
