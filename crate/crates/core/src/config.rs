//! Run configuration: one TOML document covering every tunable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::AgentConfig;
use crate::curriculum::{EnvConfig, StageSchedule, TrainSetup};
use crate::dynamics::{PlantParams, UncertaintyRanges};
use crate::error::{CulError, Result};
use crate::lincontrol::SynthesisWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub monte_carlo_trials: usize,
    pub plant: PlantParams,
    pub ranges: UncertaintyRanges,
    pub schedule: StageSchedule,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub synthesis: SynthesisWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2024,
            output_dir: PathBuf::from("runs/default"),
            monte_carlo_trials: 100,
            plant: PlantParams::nominal(),
            ranges: UncertaintyRanges::default(),
            schedule: StageSchedule::default(),
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            synthesis: SynthesisWeights::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CulError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CulError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CulError::Config(msg) => CulError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CulError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.ranges.validate()?;
        self.schedule.validate()?;
        self.env.validate()?;
        self.agent.validate()?;
        self.synthesis.validate()?;
        if self.monte_carlo_trials == 0 {
            return Err(CulError::InvalidParams {
                name: "monte_carlo_trials",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// SHA-256 (hex, first 16 digits) of every setting that can change
    /// results; the seed and output directory are excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.seed = 0;
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes to JSON");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            nominal: self.plant,
            ranges: self.ranges,
            schedule: self.schedule,
            env: self.env,
            agent: self.agent.clone(),
        }
    }
}
