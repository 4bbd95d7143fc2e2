//! Flat `key = value` configuration with environment overrides.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Every key may be overridden by an environment variable named
//! `ACCEL_` followed by the upper-cased key (`mode` → `ACCEL_MODE`).
//! Precedence is environment, then file, then built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::backend::{Preset, WorkloadKind};
use crate::transport::LinkProfile;

pub const ENV_PREFIX: &str = "ACCEL_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("bad value for `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("`{0}` is required")]
    Missing(&'static str),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

/// Parsed key-value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<KeyValues, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            entries.insert(k.to_ascii_lowercase(), v.trim().to_string());
        }
        Ok(KeyValues { entries })
    }

    pub fn read(path: &Path) -> Result<KeyValues, ConfigError> {
        KeyValues::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `ACCEL_*` variables on top of the file values.
    pub fn overlay_env<I>(mut self, vars: I) -> KeyValues
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (k, v) in vars {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                if !key.is_empty() {
                    self.entries.insert(key.to_ascii_lowercase(), v);
                }
            }
        }
        self
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Value {
                    key: key.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub(crate) fn positive(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.get_or(key, default)?;
        if !(v.is_finite() && v > 0.0) {
            return Err(value_err(key, format!("must be positive, got {v}")));
        }
        Ok(v)
    }

    pub(crate) fn non_negative(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.get_or(key, default)?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(value_err(key, format!("must be non-negative, got {v}")));
        }
        Ok(v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

pub(crate) fn value_err(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispatchMode {
    Local,
    Remote,
}

impl FromStr for DispatchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "local" => Ok(DispatchMode::Local),
            "remote" => Ok(DispatchMode::Remote),
            other => Err(format!("unknown mode `{other}` (local|remote)")),
        }
    }
}

/// Where forward calls go. Applications never choose this in code; it comes
/// from the configuration file and environment.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchConfig {
    pub mode: DispatchMode,
    pub endpoint: Option<String>,
    pub scale_factor: f64,
    /// Emulated local accelerator; `None` runs without injected delay.
    pub preset: Option<Preset>,
    pub kind: WorkloadKind,
    pub connect_timeout: Duration,
    pub cycle_timeout: Duration,
    pub link: LinkProfile,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        DispatchConfig {
            mode: DispatchMode::Local,
            endpoint: None,
            scale_factor: 0.01,
            preset: None,
            kind: WorkloadKind::Video,
            connect_timeout: Duration::from_secs(5),
            cycle_timeout: Duration::from_secs(60),
            link: LinkProfile::ideal(),
        }
    }
}

pub(crate) fn parse_preset(kv: &KeyValues, key: &str) -> Result<Option<Preset>, ConfigError> {
    match kv.get_str(key) {
        None | Some("none") => Ok(None),
        Some(s) => Preset::parse(s).map(Some).ok_or_else(|| {
            value_err(
                key,
                format!("unknown preset `{s}` (device|edge|cloud|none)"),
            )
        }),
    }
}

pub(crate) fn parse_kind(kv: &KeyValues, key: &str) -> Result<Option<WorkloadKind>, ConfigError> {
    kv.get_str(key)
        .map(|s| {
            WorkloadKind::parse(s)
                .ok_or_else(|| value_err(key, format!("unknown workload `{s}` (images|video)")))
        })
        .transpose()
}

pub(crate) fn parse_link(kv: &KeyValues) -> Result<LinkProfile, ConfigError> {
    let delay = kv.non_negative("link_delay_s", 0.0)?;
    let bw = match kv.get_str("link_bandwidth_bytes_per_s") {
        None | Some("unlimited") => None,
        Some(_) => Some(kv.positive("link_bandwidth_bytes_per_s", 1.0)?),
    };
    if delay == 0.0 && bw.is_none() && kv.get_str("link_label").is_none() {
        return Ok(LinkProfile::ideal());
    }
    let label = kv.get_str("link_label").unwrap_or("configured").to_string();
    LinkProfile::new(label, delay, bw).map_err(|e| value_err("link_delay_s", e))
}

impl DispatchConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<DispatchConfig, ConfigError> {
        let d = DispatchConfig::default();
        let cfg = DispatchConfig {
            mode: kv.get_or("mode", d.mode)?,
            endpoint: kv.get_str("endpoint").map(str::to_string),
            scale_factor: kv.positive("scale_factor", d.scale_factor)?,
            preset: parse_preset(kv, "preset")?,
            kind: parse_kind(kv, "workload_kind")?.unwrap_or(d.kind),
            connect_timeout: Duration::from_secs_f64(
                kv.positive("connect_timeout_s", d.connect_timeout.as_secs_f64())?,
            ),
            cycle_timeout: Duration::from_secs_f64(
                kv.positive("cycle_timeout_s", d.cycle_timeout.as_secs_f64())?,
            ),
            link: parse_link(kv)?,
        };
        if cfg.mode == DispatchMode::Remote && cfg.endpoint.is_none() {
            return Err(ConfigError::Missing("endpoint"));
        }
        Ok(cfg)
    }

    /// Reads the optional file, then applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<DispatchConfig, ConfigError> {
        let kv = match path {
            Some(p) => KeyValues::read(p)?,
            None => KeyValues::default(),
        };
        DispatchConfig::from_key_values(&kv.overlay_env(std::env::vars()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults() {
        let cfg = DispatchConfig::from_key_values(&KeyValues::default()).unwrap();
        assert_eq!(cfg, DispatchConfig::default());
        assert_eq!(cfg.connect_timeout, Duration::from_secs(5));
        assert_eq!(cfg.cycle_timeout, Duration::from_secs(60));
    }

    #[test]
    fn file_values() {
        let kv = KeyValues::parse(
            "# offload to the lab cloud node\nmode = remote\nendpoint = 10.0.0.2:7070\n\nscale_factor=0.5\npreset = cloud\n",
        )
        .unwrap();
        let cfg = DispatchConfig::from_key_values(&kv).unwrap();
        assert_eq!(cfg.mode, DispatchMode::Remote);
        assert_eq!(cfg.endpoint.as_deref(), Some("10.0.0.2:7070"));
        assert_eq!(cfg.scale_factor, 0.5);
        assert_eq!(cfg.preset, Some(Preset::Cloud));
    }

    #[test]
    fn env_beats_file_beats_default() {
        let kv = KeyValues::parse("mode = remote\nendpoint = a:1\nscale_factor = 0.5").unwrap();
        let kv = kv.overlay_env(env(&[
            ("ACCEL_MODE", "local"),
            ("ACCEL_CYCLE_TIMEOUT_S", "2"),
            ("OTHER_MODE", "remote"),
        ]));
        let cfg = DispatchConfig::from_key_values(&kv).unwrap();
        assert_eq!(cfg.mode, DispatchMode::Local);
        assert_eq!(cfg.scale_factor, 0.5);
        assert_eq!(cfg.cycle_timeout, Duration::from_secs(2));
        assert_eq!(cfg.connect_timeout, Duration::from_secs(5));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            KeyValues::parse("novalue"),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(
            KeyValues::parse("ok=1\n = 2"),
            Err(ConfigError::Syntax { line: 2 })
        ));
        let kv = KeyValues::parse("mode = remote").unwrap();
        assert!(matches!(
            DispatchConfig::from_key_values(&kv),
            Err(ConfigError::Missing("endpoint"))
        ));
        for bad in [
            "mode = sideways",
            "scale_factor = -1",
            "preset = gpu",
            "link_delay_s = -2",
        ] {
            let kv = KeyValues::parse(bad).unwrap();
            assert!(matches!(
                DispatchConfig::from_key_values(&kv),
                Err(ConfigError::Value { .. })
            ));
        }
    }

    #[test]
    fn link_keys() {
        let kv = KeyValues::parse("link_delay_s = 0.01\nlink_bandwidth_bytes_per_s = 1e8").unwrap();
        let cfg = DispatchConfig::from_key_values(&kv).unwrap();
        assert_eq!(cfg.link.one_way_delay_s, 0.01);
        assert_eq!(cfg.link.bandwidth_bytes_per_s, Some(1e8));
    }
}
