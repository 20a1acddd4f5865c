//! Run configuration, hashing and provenance stamps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecSpec;
use crate::denoiser::UnetConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::{make_linear_schedule, rescale_zero_terminal_snr, BetaSpacing, NoiseSchedule};
use crate::synth::SynthParams;
use crate::trainer::TrainConfig;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Config hash and tool version carried by every artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    /// PNG tEXt entries.
    pub fn png_text(&self) -> Vec<(String, String)> {
        vec![
            ("config_hash".to_string(), self.config_hash.clone()),
            ("tool_version".to_string(), self.tool_version.clone()),
        ]
    }
}

/// Noise schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: BetaSpacing,
    pub zero_terminal_snr: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            spacing: BetaSpacing::Linear,
            zero_terminal_snr: true,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let base = match self.spacing {
            BetaSpacing::Linear => make_linear_schedule(self.num_timesteps, self.beta_start, self.beta_end)?,
        };
        if self.zero_terminal_snr {
            rescale_zero_terminal_snr(&base)
        } else {
            Ok(base)
        }
    }
}

/// The whole experiment: one TOML file, sections mirror the modules.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthParams,
    pub schedule: ScheduleConfig,
    pub codec: CodecSpec,
    pub model: UnetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {}", e.message())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Applies a `section.key = value` override; `value` is parsed as a TOML
    /// value and falls back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).map_err(|e| Error::invalid(e.to_string()))?;
        let parsed: serde_json::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => serde_json::to_value(t.remove("v")).map_err(|e| Error::invalid(e.to_string()))?,
            Err(_) => serde_json::Value::String(value.to_string()),
        };
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::invalid(format!("unknown config key {key}")))?;
        }
        *slot = parsed;
        *self = serde_json::from_value(tree).map_err(|e| Error::invalid(format!("{key} = {value}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        let schedule = self.schedule.build()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate(schedule.num_timesteps())?;
        self.codec.latent_shape(self.synth.size, self.synth.size)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (keys sorted), independent of the
    /// key order in the source file.
    pub fn hash(&self) -> String {
        let tree = serde_json::to_value(self).expect("run config serializes");
        sha256_hex(tree.to_string().as_bytes())
    }

    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nepochz = 3\n").is_err());
        assert!(RunConfig::from_toml_str("[nonsense]\n").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.set("train.epochz", "3").is_err());
        assert!(cfg.set("train.epochs", "\"many\"").is_err());
    }

    #[test]
    fn hash_ignores_key_order_but_not_values() {
        let a = RunConfig::from_toml_str("[train]\nepochs = 3\nseed = 5\n[synth]\nsize = 32\n").unwrap();
        let b = RunConfig::from_toml_str("[synth]\nsize = 32\n[train]\nseed = 5\nepochs = 3\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_toml_str("[synth]\nsize = 32\n[train]\nseed = 6\nepochs = 3\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut cfg = RunConfig::default();
        cfg.set("train.epochs", "3").unwrap();
        cfg.set("train.dataset_dir", "some/where").unwrap();
        cfg.set("sampler.eta.start", "0.4").unwrap();
        cfg.set("codec", "{ kind = \"downsample\", factor = 2 }").unwrap();
        cfg.set("train.max_steps", "10").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.dataset_dir, std::path::PathBuf::from("some/where"));
        assert_eq!(cfg.sampler.eta.start, 0.4);
        assert_eq!(cfg.codec, CodecSpec::Downsample { factor: 2 });
        assert_eq!(cfg.train.max_steps, Some(10));
    }

    #[test]
    fn schedule_config_builds_zero_terminal_snr() {
        let s = ScheduleConfig::default().build().unwrap();
        assert!(s.terminal_snr_zero());
        assert_eq!(s.snr(1000).unwrap(), 0.0);
    }
}
