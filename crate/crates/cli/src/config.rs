//! Resolved run settings and the provenance block stamped into outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use atlasforge_core::attention::LogBase;
use atlasforge_core::campaign::{DEFAULT_MAX_ITERATIONS, DEFAULT_STOP_RATIO};
use atlasforge_core::ranking::DEFAULT_FRACTION;
use atlasforge_core::{AttentionParams, OverlapScope, SizeWeighting};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{AttentionFlags, ScopeArg, WeightingArg};

pub const DATA_ROOT_ENV: &str = "ATLASFORGE_DATA_ROOT";

/// A usage or configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

/// Config file contents. Every field is optional in the file; flags
/// override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event_log: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub attention: AttentionParams,
    pub log_base: LogBase,
    pub fraction: f64,
    pub stop_ratio: f64,
    pub max_iterations: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            event_log: None,
            output: None,
            attention: AttentionParams::default(),
            log_base: LogBase::E,
            fraction: DEFAULT_FRACTION,
            stop_ratio: DEFAULT_STOP_RATIO,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub config: CliConfig,
}

impl Settings {
    /// Load the config file (if any) and resolve the data root: the flag,
    /// then the file, then the environment.
    pub fn load(path: Option<&Path>, data_root: Option<PathBuf>) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
            None => CliConfig::default(),
        };
        if data_root.is_some() {
            config.data_root = data_root;
        }
        if config.data_root.is_none() {
            config.data_root = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        }
        Ok(Self { config })
    }

    fn under_root(&self, name: &str, what: &str) -> anyhow::Result<PathBuf> {
        self.config
            .data_root
            .as_ref()
            .map(|r| r.join(name))
            .ok_or_else(|| usage(format!("no {what} given and neither --data-root nor {DATA_ROOT_ENV} is set")))
    }

    /// Output location: flag, then config, then `<data root>/<default>`.
    pub fn output(&self, flag: Option<PathBuf>, default: &str) -> anyhow::Result<PathBuf> {
        match flag.or_else(|| self.config.output.clone()) {
            Some(p) => Ok(p),
            None => self.under_root(default, "output path"),
        }
    }

    /// Event log location: flag, then config, then the data root default.
    pub fn event_log(&self, flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
        match flag.or_else(|| self.config.event_log.clone()) {
            Some(p) => Ok(p),
            None => self.under_root("campaign.events.jsonl", "event log"),
        }
    }

    pub fn with_attention(&mut self, flags: &AttentionFlags) {
        let a = &mut self.config.attention;
        if let Some(t) = flags.threshold {
            a.threshold = t;
        }
        if let Some(s) = flags.overlap_scope {
            a.overlap_scope = match s {
                ScopeArg::SameArch => OverlapScope::SameArchitecture,
                ScopeArg::AnyArch => OverlapScope::AnyArchitecture,
            };
        }
        if let Some(w) = flags.size_weighting {
            a.size_weighting = match w {
                WeightingArg::Voxel => SizeWeighting::Voxel,
                WeightingArg::Physical => SizeWeighting::Physical,
            };
        }
    }

    pub fn provenance(&self, command: &str, inputs: &[PathBuf]) -> anyhow::Result<Provenance> {
        let config_json = serde_json::to_string(&self.config).expect("config serializes");
        let mut hashed = BTreeMap::new();
        for path in inputs {
            hashed.insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(Provenance {
            tool: "atlasforge".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: self.config.clone(),
            config_sha256: sha256_hex(config_json.as_bytes()),
            inputs: hashed,
        })
    }
}

/// Where an output came from: tool version, the resolved config and its
/// hash, and the hash of every input file. Contains no timestamps, so reruns
/// stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: CliConfig,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value).expect("output serializes") + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<CliConfig>(r#"{"fraction": 0.1, "fractoin": 0.2}"#).unwrap_err();
        assert!(err.to_string().contains("fractoin"));
    }

    #[test]
    fn log_base_is_fixed_to_e() {
        assert!(serde_json::from_str::<CliConfig>(r#"{"log_base": "2"}"#).is_err());
        let c: CliConfig = serde_json::from_str(r#"{"log_base": "e"}"#).unwrap();
        assert_eq!(c, CliConfig::default());
    }

    #[test]
    fn flags_override_file_values() {
        let mut s = Settings { config: serde_json::from_str(r#"{"attention": {"threshold": 0.6}}"#).unwrap() };
        s.with_attention(&AttentionFlags { threshold: Some(0.7), overlap_scope: Some(ScopeArg::AnyArch), size_weighting: None });
        assert_eq!(s.config.attention.threshold, 0.7);
        assert_eq!(s.config.attention.overlap_scope, OverlapScope::AnyArchitecture);
        assert_eq!(s.config.attention.size_weighting, SizeWeighting::Voxel);
    }

    #[test]
    fn outputs_fall_back_to_the_data_root() {
        let s = Settings { config: CliConfig { data_root: Some("/data".into()), ..CliConfig::default() } };
        assert_eq!(s.output(None, "attention").unwrap(), PathBuf::from("/data/attention"));
        assert_eq!(s.output(Some("x".into()), "attention").unwrap(), PathBuf::from("x"));
        assert_eq!(s.event_log(None).unwrap(), PathBuf::from("/data/campaign.events.jsonl"));
        let bare = Settings { config: CliConfig::default() };
        assert!(bare.output(None, "attention").unwrap_err().is::<UsageError>());
    }

    #[test]
    fn config_hash_tracks_values() {
        let a = Settings { config: CliConfig::default() };
        let b = Settings { config: CliConfig { fraction: 0.1, ..CliConfig::default() } };
        let pa = a.provenance("rank", &[]).unwrap();
        let pb = b.provenance("rank", &[]).unwrap();
        assert_ne!(pa.config_sha256, pb.config_sha256);
        assert_eq!(pa, a.provenance("rank", &[]).unwrap());
    }
}
