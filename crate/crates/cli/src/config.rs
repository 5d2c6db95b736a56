//! Run configuration shared by the subcommands, read from TOML or JSON.

use std::path::Path;

use gridread::decoder::{BeamConfig, DecodeConfig};
use gridread::predictions::OracleNoise;
use gridread::simloop::StageConfig;
use gridread::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every field is optional in the file; missing sections take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. When set it overrides the seeds of every section below.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    /// Oracle noise used by `synth` when it writes prediction maps.
    pub noise: OracleNoise,
    pub decode: DecodeConfig,
    pub beam: BeamConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Transcript-only pages.
    pub real_pages: usize,
    /// Fully annotated pages mixed into every pass.
    pub synthetic_pages: usize,
    /// Stages run in order over one pseudo-label store.
    pub stages: Vec<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            real_pages: 20,
            synthetic_pages: 5,
            stages: vec![StageConfig::default()],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
        }
    }

    /// Pushes the master seed into every section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.noise.seed = seed;
        for (k, stage) in self.train.stages.iter_mut().enumerate() {
            stage.seed = seed.wrapping_add(k as u64);
            stage.noise.seed = seed.wrapping_add(k as u64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let toml_text = r#"
            seed = 4
            [synth]
            n_lines = 3
            layout = { kind = "rotated90" }
            [decode]
            nms_iou = 0.4
            [[train.stages]]
            stage = "train"
            n_passes = 2
            [train.stages.noise]
            jitter_sigma = 0.1
        "#;
        let from_toml: RunConfig = toml::from_str(toml_text).unwrap();
        let json = serde_json::to_string(&from_toml).unwrap();
        let from_json: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(from_toml, from_json);
        assert_eq!(from_toml.synth.n_lines, 3);
        assert_eq!(from_toml.decode.nms_iou, 0.4);
        assert_eq!(from_toml.decode.sol_eol_threshold, 0.9);
        assert_eq!(from_toml.train.stages[0].noise.jitter_sigma, 0.1);
        assert_eq!(from_toml.train.real_pages, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 3").is_err());
    }
}
