//! Runtime configuration: a TOML file plus `GRIDPULSE_*` environment
//! overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const ENV_PREFIX: &str = "GRIDPULSE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiConfig {
    pub listen: String,
    pub poll_interval_minutes: u64,
    pub step_hours: i64,
    pub clusters: usize,
    pub samples: u64,
    /// Seed for clustering and fitting. Commands that need one generate
    /// and record a seed when this is unset.
    pub seed: Option<u64>,
    pub data_dir: PathBuf,
    /// Live snapshot feed polled by `serve`.
    pub source_url: Option<String>,
    /// Snapshot archive replayed by `serve` when no live feed is set.
    pub replay_dir: Option<PathBuf>,
    /// Address lookup service; the offline `geocoder.csv` is used otherwise.
    pub geocoder_url: Option<String>,
    /// Hour (UTC) of the nightly transition-matrix refit.
    pub refit_hour_utc: u32,
    /// Candidate entries for the sampled fit are drawn from
    /// `[entry_min, entry_max)`.
    pub entry_min: f64,
    pub entry_max: f64,
    pub kmeans_restarts: usize,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            poll_interval_minutes: 30,
            step_hours: 2,
            clusters: 11,
            samples: 100_000,
            seed: None,
            data_dir: PathBuf::from("data"),
            source_url: None,
            replay_dir: None,
            geocoder_url: None,
            refit_hour_utc: 3,
            entry_min: 0.0,
            entry_max: 1.0,
            kmeans_restarts: 10,
        }
    }
}

const KEYS: [&str; 14] = [
    "listen",
    "poll_interval_minutes",
    "step_hours",
    "clusters",
    "samples",
    "seed",
    "data_dir",
    "source_url",
    "replay_dir",
    "geocoder_url",
    "refit_hour_utc",
    "entry_min",
    "entry_max",
    "kmeans_restarts",
];

fn env_value(key: &str, raw: &str) -> Result<toml::Value> {
    let bad = |e: &dyn std::fmt::Display| Error::parse(format!("{ENV_PREFIX}{}", key.to_ascii_uppercase()), e.to_string());
    Ok(match key {
        "poll_interval_minutes" | "step_hours" | "clusters" | "samples" | "seed" | "refit_hour_utc"
        | "kmeans_restarts" => toml::Value::Integer(raw.trim().parse().map_err(|e| bad(&e))?),
        "entry_min" | "entry_max" => toml::Value::Float(raw.trim().parse().map_err(|e| bad(&e))?),
        _ => toml::Value::String(raw.to_string()),
    })
}

impl ApiConfig {
    /// Merges the TOML text (if any) with `GRIDPULSE_<KEY>` overrides and
    /// validates the result.
    pub fn from_sources(toml_text: Option<&str>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = match toml_text {
            Some(text) => text
                .parse()
                .map_err(|e: toml::de::Error| Error::parse("config", e.message()))?,
            None => toml::Table::new(),
        };
        for (name, raw) in env {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            if KEYS.contains(&key.as_str()) {
                let value = env_value(&key, &raw)?;
                table.insert(key, value);
            }
        }
        let cfg: ApiConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::parse("config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (when given) and the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .transpose()?;
        Self::from_sources(text.as_deref(), std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        if self.poll_interval_minutes == 0 {
            return Err(Error::Validation("poll_interval_minutes must be > 0".into()));
        }
        if self.step_hours <= 0 {
            return Err(Error::Validation("step_hours must be > 0".into()));
        }
        if self.clusters == 0 {
            return Err(Error::Validation("clusters must be ≥ 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Validation("samples must be ≥ 1".into()));
        }
        if self.refit_hour_utc > 23 {
            return Err(Error::Validation("refit_hour_utc must be 0..=23".into()));
        }
        if !(self.entry_min >= 0.0 && self.entry_max > self.entry_min && self.entry_max.is_finite()) {
            return Err(Error::Validation("candidate entry range must satisfy 0 ≤ entry_min < entry_max".into()));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::Validation("kmeans_restarts must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn poll_interval(&self) -> Duration {
        Duration::from_secs(self.poll_interval_minutes * 60)
    }

    pub fn step(&self) -> chrono::Duration {
        chrono::Duration::hours(self.step_hours)
    }

    pub fn zips_path(&self) -> PathBuf {
        self.data_dir.join("zips.csv")
    }

    pub fn geocoder_path(&self) -> PathBuf {
        self.data_dir.join("geocoder.csv")
    }

    pub fn features_path(&self) -> PathBuf {
        self.data_dir.join("features.csv")
    }

    pub fn demographics_path(&self) -> PathBuf {
        self.data_dir.join("demographics.csv")
    }

    pub fn database_path(&self) -> PathBuf {
        self.data_dir.join("gridpulse.db")
    }

    pub fn rankings_path(&self) -> PathBuf {
        self.data_dir.join("rankings.json")
    }

    pub fn clusters_path(&self) -> PathBuf {
        self.data_dir.join("clusters.json")
    }

    pub fn model_path(&self) -> PathBuf {
        self.data_dir.join("model.json")
    }

    pub fn analytics_dir(&self) -> PathBuf {
        self.data_dir.join("analytics")
    }
}
