//! One TOML file configures a whole run; command-line flags override
//! individual fields after loading.

use crate::backbone::{BackboneConfig, PretrainMode};
use crate::data::synthetic::SyntheticSpec;
use crate::encoder::{EncoderConfig, Propagation};
use crate::error::{Error, Result};
use crate::graph::EdgeScope;
use crate::model::AblationFlags;
use crate::prompt::SegmentOrder;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    /// Seed for corpus generation, separate from the training seed so
    /// multi-seed runs share one dataset.
    pub corpus_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            spec: SyntheticSpec::default(),
            corpus_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub num_shared: usize,
    pub order: SegmentOrder,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            num_shared: 100,
            order: SegmentOrder::PromptsFirst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainKind {
    SpanCorruption,
    RandomFrozen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub kind: PretrainKind,
    pub steps: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            kind: PretrainKind::SpanCorruption,
            steps: 200,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn mode(&self) -> PretrainMode {
        match self.kind {
            PretrainKind::SpanCorruption => PretrainMode::SpanCorruption { steps: self.steps },
            PretrainKind::RandomFrozen => PretrainMode::RandomFrozen,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub propagations: Vec<Propagation>,
    pub num_levels: Vec<usize>,
    pub hidden_dims: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            propagations: vec![Propagation::Gcn],
            num_levels: vec![2],
            hidden_dims: vec![64, 128, 256, 512],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub prompts: PromptConfig,
    pub pretrain: PretrainConfig,
    pub sweep: SweepConfig,
    pub ablation: String,
    pub edge_scope: EdgeScope,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            prompts: PromptConfig::default(),
            pretrain: PretrainConfig::default(),
            sweep: SweepConfig::default(),
            ablation: "full".to_string(),
            edge_scope: EdgeScope::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.ablation.is_empty() {
            cfg.ablation = "full".to_string();
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        // The backbone vocabulary size is resolved later from the
        // corpus; validate everything else.
        let mut backbone = self.backbone.clone();
        if backbone.vocab_size == 0 {
            backbone.vocab_size = 1;
        }
        backbone.validate()?;
        AblationFlags::from_name(&self.ablation)?;
        if matches!(self.pretrain.kind, PretrainKind::SpanCorruption) && self.pretrain.steps == 0 {
            return Err(Error::Config(
                "span corruption pretraining needs at least 1 step".to_string(),
            ));
        }
        if self.sweep.propagations.is_empty()
            || self.sweep.num_levels.is_empty()
            || self.sweep.hidden_dims.is_empty()
        {
            return Err(Error::Config("sweep grid axes must be nonempty".to_string()));
        }
        Ok(())
    }

    pub fn ablation_flags(&self) -> Result<AblationFlags> {
        AblationFlags::from_name(&self.ablation)
    }
}
