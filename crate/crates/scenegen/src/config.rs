//! Run configuration: a TOML file with sections mirroring the module
//! configs, merged with command-line overrides before any subcommand runs.

use crate::model::ModelConfig;
use crate::playback::{EgoPolicy, PlaybackConfig};
use crate::scenario::{Handedness, SpawnBands};
use crate::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to parse config: {0}")]
    Toml(#[from] toml::de::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub ontology: Option<PathBuf>,
    pub handedness: Handedness,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub bands: SpawnBands,
    pub policy: EgoPolicy,
    pub playback: PlaybackConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 0,
            ontology: None,
            handedness: Handedness::Right,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            bands: SpawnBands::default(),
            policy: EgoPolicy::default(),
            playback: PlaybackConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(toml::from_str(&text)?)
    }

    /// Propagates the top-level seed into the module configs that consume
    /// their own; called after flag overrides.
    pub fn resolve(&mut self) {
        self.synth.rng_seed = self.seed;
        self.model.rng_seed = self.seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_sections_parse() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.seed, 0);

        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            out_dir = "work"

            [synth]
            n_scenarios = 12

            [model]
            epochs = 3
            threshold = 0.4

            [bands]
            near_m = 9.0

            [policy]
            name = "custom"
            target_speed = 7.5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.synth.n_scenarios, 12);
        assert_eq!(cfg.model.epochs, 3);
        assert_eq!(cfg.bands.near_m, 9.0);
        assert_eq!(cfg.policy.target_speed, 7.5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[synth]\nbogus = 1").is_err());
    }

    #[test]
    fn resolve_propagates_seed() {
        let mut cfg = RunConfig {
            seed: 42,
            ..RunConfig::default()
        };
        cfg.resolve();
        assert_eq!(cfg.synth.rng_seed, 42);
        assert_eq!(cfg.model.rng_seed, 42);
    }
}
