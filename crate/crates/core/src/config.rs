//! Run configuration, read from and written to TOML.
//!
//! Every field has a default, so an empty file is a valid config. Runs
//! write their resolved config next to their outputs; feeding that file
//! back reproduces the run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptationConfig, Strategy};
use crate::error::{Error, Result};
use crate::nn::{Adaptation, HeadLayout, ModelConfig, HEAD_DROPOUT};
use crate::optim::OptimizerKind;
use crate::tiling::{OverlapAggregate, SplitMode, TilingConfig, DEFAULT_R_TH, DEFAULT_TILE};

pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingSection {
    pub tile: u32,
    pub r_th: f64,
    pub aggregate: OverlapAggregate,
    /// Empty means every annotated box is a positive.
    pub positive_class: String,
}

impl Default for TilingSection {
    fn default() -> Self {
        Self {
            tile: DEFAULT_TILE,
            r_th: DEFAULT_R_TH,
            aggregate: OverlapAggregate::Max,
            positive_class: String::new(),
        }
    }
}

impl TilingSection {
    pub fn to_tiling(&self) -> TilingConfig {
        TilingConfig {
            tile: self.tile,
            r_th: self.r_th,
            aggregate: self.aggregate,
            positive_class: (!self.positive_class.is_empty()).then(|| self.positive_class.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub val_fraction: f64,
    pub mode: SplitMode,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            mode: SplitMode::Pooled,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub unfreeze: usize,
    /// LoRA rank; 0 disables the adapters.
    pub lora_rank: usize,
    /// LoRA scale numerator; 0 means "same as the rank".
    pub lora_alpha: f64,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            hidden: m.hidden,
            feature_dim: m.feature_dim,
            unfreeze: m.unfreeze,
            lora_rank: 0,
            lora_alpha: 0.0,
            dropout: HEAD_DROPOUT,
        }
    }
}

impl ModelSection {
    /// Model for `input_dim` features and the given head layout.
    pub fn to_model(&self, input_dim: usize, heads: HeadLayout, seed: u64) -> Result<ModelConfig> {
        let adaptation = if self.lora_rank == 0 {
            Adaptation::None
        } else {
            Adaptation::Lora {
                rank: self.lora_rank,
                alpha: (self.lora_alpha != 0.0).then_some(self.lora_alpha),
            }
        };
        let config = ModelConfig {
            input_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            unfreeze: self.unfreeze,
            adaptation,
            dropout: self.dropout,
            heads,
            seed,
        }
        .resolved();
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub strategy: Strategy,
    pub lambda: f64,
    pub epochs: usize,
    pub warmup: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
    /// Cross-entropy weights of classes 0 and 1; empty means unweighted.
    pub class_weights: Vec<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let a = AdaptationConfig::default();
        Self {
            strategy: a.strategy,
            lambda: a.lambda,
            epochs: a.epochs,
            warmup: a.warmup,
            lr: a.lr,
            optimizer: a.optimizer,
            batch_size: a.batch_size,
            seed: a.seed,
            class_weights: Vec::new(),
        }
    }
}

impl TrainingSection {
    pub fn to_adaptation(&self) -> Result<AdaptationConfig> {
        let class_weights = match self.class_weights.as_slice() {
            [] => None,
            &[w0, w1] => Some([w0, w1]),
            other => {
                return Err(Error::Config(format!(
                    "class_weights needs 2 entries, got {}",
                    other.len()
                )))
            }
        };
        let config = AdaptationConfig {
            strategy: self.strategy,
            lambda: self.lambda,
            epochs: self.epochs,
            warmup: self.warmup,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer,
            seed: self.seed,
            class_weights,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Trailing epochs over which the spread of the median F1 is taken.
    pub window: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { window: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub n_samples: usize,
    pub target_shift: f64,
    pub val_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 2000,
            target_shift: 3.0,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tiling: TilingSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Checks what can be checked without data.
    pub fn validate(&self) -> Result<()> {
        if !(self.tiling.r_th > 0.0 && self.tiling.r_th < 1.0) {
            return Err(Error::Config(format!("r_th {} must lie in (0, 1)", self.tiling.r_th)));
        }
        if self.tiling.tile == 0 {
            return Err(Error::Config("tile side must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.split.val_fraction) {
            return Err(Error::Config("split.val_fraction must lie in [0, 1)".into()));
        }
        if self.evaluation.window == 0 {
            return Err(Error::Config("evaluation.window must be positive".into()));
        }
        self.training.to_adaptation()?;
        self.model.to_model(1, HeadLayout::Single, 0)?;
        Ok(())
    }
}
