//! Experiment configuration (JSON).

use std::path::{Path, PathBuf};

use projres_core::attacks::{NonmemberSource, ScoreFunction};
use projres_core::data::DatasetSpec;
use projres_core::defenses::DefenseConfig;
use projres_core::federation::FederationConfig;
use projres_core::model::{BackboneConfig, ModuleSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

fn default_tau() -> f64 {
    1e-2
}

fn default_repetitions() -> usize {
    100
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_attacks() -> Vec<ScoreFunction> {
    let mut all = vec![ScoreFunction::PROJRES];
    all.extend(ScoreFunction::baselines());
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Rounds to attack. Empty means the last round.
    #[serde(default)]
    pub rounds: Vec<usize>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub nonmember_source: NonmemberSource,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            rounds: Vec::new(),
            repetitions: default_repetitions(),
            seed: 0,
            nonmember_source: NonmemberSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub modules: Vec<ModuleSpec>,
    /// Seed of the trainable-parameter initialization.
    #[serde(default)]
    pub param_seed: u64,
    pub federation: FederationConfig,
    pub dataset: DatasetSpec,
    /// Defense grid. Empty means the single defense in `federation`
    /// (or none).
    #[serde(default)]
    pub defenses: Vec<DefenseConfig>,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<ScoreFunction>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Also write every training trace as binary dumps.
    #[serde(default)]
    pub dump_traces: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            CliError::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()
            .map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), String> {
        let core = |e: projres_core::Error| e.to_string();
        self.backbone.validate().map_err(core)?;
        self.federation.validate().map_err(core)?;
        if self.modules.is_empty() {
            return Err("modules: at least one trainable module is required".into());
        }
        for (i, m) in self.modules.iter().enumerate() {
            if m.position > self.backbone.num_frozen_layers {
                return Err(format!(
                    "modules[{i}]: position {} exceeds num_frozen_layers {}",
                    m.position, self.backbone.num_frozen_layers
                ));
            }
            m.kind
                .out_dim(self.backbone.hidden_dim)
                .map_err(|e| format!("modules[{i}]: {e}"))?;
        }
        for d in &self.defenses {
            d.validate().map_err(core)?;
        }
        if self.attacks.is_empty() {
            return Err("attacks: list is empty".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if self.evaluation.repetitions == 0 {
            return Err("evaluation.repetitions must be at least 1".into());
        }
        if let Some(r) = self.evaluation.rounds.iter().find(|&&r| r >= self.federation.rounds) {
            return Err(format!(
                "evaluation.rounds: round {r} is past the last round {}",
                self.federation.rounds - 1
            ));
        }
        Ok(())
    }

    pub fn defense_grid(&self) -> Vec<DefenseConfig> {
        if self.defenses.is_empty() {
            vec![self.federation.defense.unwrap_or_default()]
        } else {
            self.defenses.clone()
        }
    }

    pub fn eval_rounds(&self) -> Vec<usize> {
        if self.evaluation.rounds.is_empty() {
            vec![self.federation.rounds - 1]
        } else {
            self.evaluation.rounds.clone()
        }
    }

    pub fn dataset_seed(&self) -> u64 {
        match &self.dataset {
            DatasetSpec::Synthetic(s) => s.seed,
            DatasetSpec::TextFile(t) => t.split_seed,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    /// Where the outputs go does not change the experiment, so
    /// `output_dir` and `dump_traces` are left out.
    pub fn hash(&self) -> String {
        let mut identity = self.clone();
        identity.output_dir = PathBuf::new();
        identity.dump_traces = false;
        let canonical = serde_json::to_vec(&identity).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))[..16].to_string()
    }
}
