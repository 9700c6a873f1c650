use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::metrics::{AuditConfig, ClassifierConfig};
use crate::optim::AdamWConfig;
use crate::policy::{LayerSelection, ModelConfig, TargetKind};
use crate::ppo::PpoConfig;
use crate::reward::RmConfig;
use crate::sft::SftConfig;
use crate::task::SyntheticSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub spec: SyntheticSpec,
    pub n_demonstrations: usize,
    pub n_preferences: usize,
    /// Generic-style corpus used to pretrain the base policy.
    pub n_pretrain: usize,
    /// Labeled corpus for the style classifier (train / calibrate / held out).
    pub n_style: usize,
    /// Fraction of preference pairs used for reward-model training.
    pub pref_train_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticSpec::default(),
            n_demonstrations: 200,
            n_preferences: 300,
            n_pretrain: 600,
            n_style: 400,
            pref_train_frac: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// LoRA in the top `top_layers` blocks.
    Lora,
    /// Every base weight trainable, no adapters.
    FullParam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub top_layers: usize,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<TargetKind>,
    /// Multiplies the SFT and PPO learning rates when every weight trains.
    pub full_param_lr_scale: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: AdaptMode::Lora,
            top_layers: 4,
            rank: 2,
            alpha: 16.0,
            targets: TargetKind::ALL.to_vec(),
            full_param_lr_scale: 0.1,
        }
    }
}

impl AdaptConfig {
    pub fn selection(&self, n_layers: usize) -> Result<LayerSelection, ExperimentError> {
        Ok(LayerSelection::top(self.top_layers, n_layers)?.with_kinds(self.targets.iter().copied()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSwitches {
    pub sft: bool,
    pub ppo: bool,
}

impl Default for StageSwitches {
    fn default() -> Self {
        Self { sft: true, ppo: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub classifier: ClassifierConfig,
    pub audit: AuditConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            classifier: ClassifierConfig::default(),
            audit: AuditConfig::default(),
        }
    }
}

/// Minimum headline values for `eval`; unset entries are not checked.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub sac: Option<f64>,
    pub apc: Option<f64>,
    pub bleu4: Option<f64>,
    pub ca: Option<f64>,
    pub pwr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

/// Everything a run needs. `seed` is copied into every component seed
/// when the config is resolved; components draw from separate streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub adapt: AdaptConfig,
    pub stages: StageSwitches,
    pub pretrain: SftConfig,
    pub sft: SftConfig,
    pub reward: RmConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
    pub thresholds: Thresholds,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            adapt: AdaptConfig::default(),
            stages: StageSwitches::default(),
            pretrain: SftConfig {
                optimizer: AdamWConfig {
                    lr: 3e-3,
                    ..Default::default()
                },
                epochs: 4,
                batch_size: 16,
                ..Default::default()
            },
            sft: SftConfig::default(),
            reward: RmConfig::default(),
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
            thresholds: Thresholds::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let c: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.data.spec.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.model.validate()?;
        let vocab = self.data.spec.vocab().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if vocab.len() != self.model.vocab_size {
            return Err(ExperimentError::Config(format!(
                "model.vocab_size = {} but the task vocabulary has {} tokens",
                self.model.vocab_size,
                vocab.len()
            )));
        }
        let need = self.data.spec.prompt_len() + 9;
        if need > self.model.max_seq_len {
            return Err(ExperimentError::Config(format!(
                "max_seq_len {} cannot hold a prompt plus a professor response ({need})",
                self.model.max_seq_len
            )));
        }
        if self.adapt.mode == AdaptMode::Lora {
            self.adapt.selection(self.model.n_layers)?;
        }
        if !(self.adapt.full_param_lr_scale > 0.0) {
            return Err(ExperimentError::Config("full_param_lr_scale must be positive".into()));
        }
        self.ppo.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if !(self.data.pref_train_frac > 0.0 && self.data.pref_train_frac < 1.0) {
            return Err(ExperimentError::Config("pref_train_frac must lie in (0, 1)".into()));
        }
        if self.data.n_demonstrations < 10 || self.data.n_preferences < 2 || self.data.n_style < 10 {
            return Err(ExperimentError::Config("corpora are too small to split".into()));
        }
        Ok(())
    }

    /// Copies the run seed into every component.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = c.seed;
        c.data.spec.seed = s;
        c.model.seed = s;
        c.pretrain.seed = s;
        c.sft.seed = s;
        c.reward.seed = s;
        c.ppo.seed = s;
        c.eval.audit.seed = s;
        c
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("run".to_string(), self.seed),
            ("data".to_string(), self.data.spec.seed),
            ("model".to_string(), self.model.seed),
            ("pretrain".to_string(), self.pretrain.seed),
            ("sft".to_string(), self.sft.seed),
            ("reward".to_string(), self.reward.seed),
            ("ppo".to_string(), self.ppo.seed),
            ("audit".to_string(), self.eval.audit.seed),
        ])
    }
}
