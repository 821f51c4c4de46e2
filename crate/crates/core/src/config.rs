//! Settings shared by the CLI and the service.
//!
//! Precedence is environment over file over built-in default. The file is
//! TOML, or JSON when the path ends in `.json`. Recognised variables:
//!
//! | variable                      | field                          |
//! |-------------------------------|--------------------------------|
//! | `STOPLINE_LISTEN`             | `listen`                       |
//! | `STOPLINE_STORE_DIR`          | `store_dir`                    |
//! | `STOPLINE_STATIC_DIR`         | `static_dir`                   |
//! | `STOPLINE_IMAGERY_ENDPOINT`   | `imagery.endpoint`             |
//! | `STOPLINE_IMAGERY_TIMEOUT_S`  | `imagery.timeout_s`            |
//! | `STOPLINE_CRS_UNITS`          | `imagery.crs_units`            |
//! | `STOPLINE_SEED`               | `robust.seed`                  |
//! | `STOPLINE_A_TRIGGER`          | `pipeline.thresholds.a_trigger`|
//! | `STOPLINE_STRICT`             | `pipeline.strict`              |

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::homog::RobustParams;
use crate::ortho::CrsUnits;
use crate::pipeline::PipelineConfig;

pub const ENV_PREFIX: &str = "STOPLINE_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {name}={value}: {message}")]
    Env { name: String, value: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageryConfig {
    /// ArcGIS-style `exportImage` endpoint. Empty means no remote imagery.
    pub endpoint: String,
    pub timeout_s: f64,
    pub crs_id: String,
    pub crs_units: CrsUnits,
    /// Default export size, px.
    pub size: (u32, u32),
}

impl Default for ImageryConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            timeout_s: 30.0,
            crs_id: "EPSG:6438".into(),
            crs_units: CrsUnits::Meters,
            size: (2048, 2048),
        }
    }
}

impl ImageryConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub listen: String,
    pub store_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub imagery: ImageryConfig,
    pub robust: RobustParams,
    pub pipeline: PipelineConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            store_dir: PathBuf::from("stopline-data"),
            static_dir: None,
            imagery: ImageryConfig::default(),
            robust: RobustParams::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Loads the optional file, applies the process environment and validates.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|name| std::env::var(name).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides fields from `lookup`, which receives full variable names.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |key: &str| lookup(&format!("{ENV_PREFIX}{key}")).map(|v| (format!("{ENV_PREFIX}{key}"), v));
        fn parse<T: std::str::FromStr>((name, value): (String, String)) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.trim().parse::<T>().map_err(|e| ConfigError::Env {
                message: e.to_string(),
                name,
                value,
            })
        }
        if let Some((_, v)) = get("LISTEN") {
            self.listen = v;
        }
        if let Some((_, v)) = get("STORE_DIR") {
            self.store_dir = PathBuf::from(v);
        }
        if let Some((_, v)) = get("STATIC_DIR") {
            self.static_dir = Some(PathBuf::from(v));
        }
        if let Some((_, v)) = get("IMAGERY_ENDPOINT") {
            self.imagery.endpoint = v;
        }
        if let Some(kv) = get("IMAGERY_TIMEOUT_S") {
            self.imagery.timeout_s = parse(kv)?;
        }
        if let Some((name, value)) = get("CRS_UNITS") {
            self.imagery.crs_units = serde_json::from_value(serde_json::Value::String(value.trim().to_lowercase())).map_err(|_| ConfigError::Env {
                name,
                value,
                message: "expected meters, feet or degrees".into(),
            })?;
        }
        if let Some(kv) = get("SEED") {
            self.robust.seed = parse(kv)?;
        }
        if let Some(kv) = get("A_TRIGGER") {
            self.pipeline.thresholds.a_trigger = parse(kv)?;
        }
        if let Some(kv) = get("STRICT") {
            self.pipeline.strict = parse(kv)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.robust.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pipeline.thresholds.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.imagery.timeout_s > 0.0 && self.imagery.timeout_s.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "imagery.timeout_s must be positive, got {}",
                self.imagery.timeout_s
            )));
        }
        if !(self.pipeline.ema_alpha > 0.0 && self.pipeline.ema_alpha <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "pipeline.ema_alpha must be in (0, 1], got {}",
                self.pipeline.ema_alpha
            )));
        }
        if !(self.pipeline.dt > 0.0 && self.pipeline.dt.is_finite()) {
            return Err(ConfigError::Invalid(format!("pipeline.dt must be positive, got {}", self.pipeline.dt)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn env_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stopline.toml");
        std::fs::write(
            &path,
            "listen = \"0.0.0.0:9000\"\nstore_dir = \"/data\"\n[pipeline.thresholds]\na_trigger = 0.3\n[robust]\nseed = 7\n",
        )
        .unwrap();
        let mut cfg = AppConfig::from_file(&path).unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.pipeline.thresholds.a_trigger, 0.3);
        // Untouched fields keep their defaults.
        assert_eq!(cfg.pipeline.thresholds.min_duration, 0.2);
        assert_eq!(cfg.robust.inlier_threshold, 3.0);

        let env: HashMap<&str, &str> = [("STOPLINE_SEED", "99"), ("STOPLINE_LISTEN", "127.0.0.1:1"), ("STOPLINE_CRS_UNITS", "Feet")].into();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.robust.seed, 99);
        assert_eq!(cfg.listen, "127.0.0.1:1");
        assert_eq!(cfg.store_dir, PathBuf::from("/data"));
        assert_eq!(cfg.imagery.crs_units, CrsUnits::Feet);
    }

    #[test]
    fn json_files_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"pipeline": {"strict": false}}"#).unwrap();
        let cfg = AppConfig::from_file(&path).unwrap();
        assert!(!cfg.pipeline.strict);
    }

    #[test]
    fn bad_env_value_names_the_variable() {
        let mut cfg = AppConfig::default();
        let err = cfg.apply_env(|k| (k == "STOPLINE_SEED").then(|| "abc".to_string())).unwrap_err();
        assert!(err.to_string().contains("STOPLINE_SEED"));
    }

    #[test]
    fn invalid_thresholds_are_rejected() {
        let mut cfg = AppConfig::default();
        cfg.pipeline.thresholds.a_trigger = -1.0;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        assert!(AppConfig::default().validate().is_ok());
    }
}
