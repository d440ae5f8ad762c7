//! Experiment configuration, loaded from TOML.
//!
//! ```toml
//! users = 25
//! devices_per_user = 6
//! model = "unpredictable"
//! mu = 0.5
//! theta = [1.0, 0.01]   # or a single number; cycled per file
//! T = 6.0
//! T_out = 0.8
//! files = 50
//! chunk_kib = 512
//! file_mib = 50
//! seed = 1
//! ```
//!
//! Every other field has a default, see [`ExperimentConfig::default`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

use crate::model::ModelKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ThetaSpec {
    One(f64),
    Many(Vec<f64>),
}

/// Unavailability thresholds, assigned to files round-robin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ThetaSpec", into = "Vec<f64>")]
pub struct Thetas(pub Vec<f64>);

impl From<ThetaSpec> for Thetas {
    fn from(s: ThetaSpec) -> Self {
        match s {
            ThetaSpec::One(t) => Thetas(vec![t]),
            ThetaSpec::Many(v) => Thetas(v),
        }
    }
}

impl From<Thetas> for Vec<f64> {
    fn from(t: Thetas) -> Self {
        t.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub users: usize,
    pub devices_per_user: usize,
    pub locations: usize,
    pub model: ModelKind,
    pub mu: f64,
    pub theta: Thetas,
    /// Round period, seconds.
    #[serde(rename = "T")]
    pub round_secs: f64,
    /// Per-attempt send timeout, seconds.
    #[serde(rename = "T_out")]
    pub timeout_secs: f64,
    pub files: usize,
    pub chunk_kib: f64,
    pub file_mib: f64,
    pub seed: u64,

    /// Rounds of pre-generated history given to every e-squad.
    pub l_init: usize,
    pub exchange_every_rounds: usize,
    pub teardown_after_rounds: usize,
    pub latency_ms: f64,
    pub window: usize,
    pub retry_secs: f64,
    pub view_capacity: usize,
    pub gossip_len: usize,
    pub bootstrap_len: usize,
    /// Descriptor exchanges every device performs before round 0.
    pub warmup_ticks: usize,
    /// Pairwise e-squad syncs per round, as rounds of random matchings.
    pub squad_gossip_passes: usize,
    /// Independent loss applied to every onion message when sent.
    pub drop_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            users: 25,
            devices_per_user: 6,
            locations: 4,
            model: ModelKind::Unpredictable,
            mu: 0.5,
            theta: Thetas(vec![0.001]),
            round_secs: 6.0,
            timeout_secs: 0.8,
            files: 50,
            chunk_kib: 512.0,
            file_mib: 50.0,
            seed: 1,
            l_init: 50,
            exchange_every_rounds: 5,
            teardown_after_rounds: 20,
            latency_ms: 50.0,
            window: spores::transfer::DEFAULT_WINDOW,
            retry_secs: spores::transfer::DEFAULT_RETRY_SECS,
            view_capacity: spores::overlay::DEFAULT_VIEW_CAPACITY,
            gossip_len: spores::overlay::DEFAULT_GOSSIP_LEN,
            bootstrap_len: spores::overlay::DEFAULT_BOOTSTRAP_LEN,
            warmup_ticks: 40,
            squad_gossip_passes: 3,
            drop_rate: 0.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.users < 2 {
            return Err(invalid("need at least two users"));
        }
        if self.users > 128 {
            return Err(invalid("at most 128 users are supported"));
        }
        if self.devices_per_user == 0 || self.devices_per_user > spores::esquad::MAX_DEVICES {
            return Err(invalid(format!(
                "devices_per_user must be in 1..={}",
                spores::esquad::MAX_DEVICES
            )));
        }
        if self.locations == 0 {
            return Err(invalid("locations must be positive"));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(invalid(format!("mu {} outside (0, 1)", self.mu)));
        }
        if self.theta.0.is_empty() {
            return Err(invalid("theta list is empty"));
        }
        if let Some(t) = self.theta.0.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(invalid(format!("theta {t} outside (0, 1]")));
        }
        for (name, v) in [
            ("T", self.round_secs),
            ("T_out", self.timeout_secs),
            ("retry_secs", self.retry_secs),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.latency_ms >= 0.0 && self.latency_ms.is_finite()) {
            return Err(invalid("latency_ms must be non-negative"));
        }
        if self.latency_ms / 1000.0 >= self.timeout_secs {
            return Err(invalid("latency must be below T_out"));
        }
        if self.files == 0 {
            return Err(invalid("files must be positive"));
        }
        if self.exchange_every_rounds == 0 {
            return Err(invalid("exchange_every_rounds must be positive"));
        }
        if self.chunk_bytes() == 0 {
            return Err(invalid("chunk_kib must give at least one byte"));
        }
        if !(self.file_mib >= 0.0) || self.file_bytes() > (1 << 32) {
            return Err(invalid("file_mib must be in [0, 4096]"));
        }
        if self.file_bytes().div_ceil(self.chunk_bytes() as u64) > u32::MAX as u64 {
            return Err(invalid("too many chunks"));
        }
        if self.window == 0 || self.view_capacity == 0 {
            return Err(invalid("window and view_capacity must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(invalid("drop_rate must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn chunk_bytes(&self) -> u32 {
        let b = (self.chunk_kib * 1024.0).round();
        if b.is_finite() && b >= 1.0 && b <= u32::MAX as f64 {
            b as u32
        } else {
            0
        }
    }

    pub fn file_bytes(&self) -> u64 {
        (self.file_mib * 1024.0 * 1024.0).round() as u64
    }

    pub fn theta_for_file(&self, i: usize) -> f64 {
        self.theta.0[i % self.theta.0.len()]
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML form.
    pub fn hash(&self) -> String {
        content_hash(self.to_toml().as_bytes())
    }
}

/// First 16 hex digits of SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_setup() {
        let c = ExperimentConfig::default();
        assert_eq!((c.users, c.devices_per_user, c.locations), (25, 6, 4));
        assert_eq!(c.theta.0, vec![0.001]);
        assert_eq!(c.files, 50);
        assert_eq!(c.round_secs, 6.0);
        assert_eq!(c.file_bytes().div_ceil(c.chunk_bytes() as u64), 100);
        c.validate().unwrap();
    }

    #[test]
    fn parses_scalar_and_list_theta() {
        let c = ExperimentConfig::from_toml_str("theta = 0.1\nT = 3.0").unwrap();
        assert_eq!(c.theta.0, vec![0.1]);
        assert_eq!(c.round_secs, 3.0);
        let c = ExperimentConfig::from_toml_str("theta = [1, 0.1, 0.01]\nmodel = \"det\"").unwrap_err();
        assert!(c.to_string().contains("model"));
        let c = ExperimentConfig::from_toml_str("theta = [1, 0.1, 0.01]\nmodel = \"deterministic\"").unwrap();
        assert_eq!(c.theta_for_file(4), 0.1);
    }

    #[test]
    fn rejects_invalid_values() {
        for bad in [
            "mu = 1.0",
            "theta = 0",
            "theta = []",
            "users = 1",
            "chunk_kib = 0",
            "T = -1",
            "drop_rate = 1.0",
            "unknown_key = 3",
            "files = \"many\"",
        ] {
            assert!(ExperimentConfig::from_toml_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
        let round = ExperimentConfig::from_toml_str(&a.to_toml()).unwrap();
        assert_eq!(round, a);
    }
}
