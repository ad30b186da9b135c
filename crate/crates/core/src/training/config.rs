use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::fusion::{DEFAULT_FUSED_DIM, DEFAULT_FUSION_ATTENTION_DIM};
use crate::error::{Error, Result};
use crate::mil::{FusionShape, ModelShape, DEFAULT_ATTENTION_DIM, DEFAULT_HEAD_WIDTHS};

pub const DEFAULT_PATCHES_PER_BAG: usize = 2000;
pub const DEFAULT_FOLDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    Sgd,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Concat,
    Attention,
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "attention" => Ok(FusionKind::Attention),
            other => Err(Error::Config(format!("unknown fusion `{other}` (concat|attention)"))),
        }
    }
}

/// What one bag is: a single slide, or all of a patient's slides pooled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BagUnit {
    #[default]
    Slide,
    Patient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub patches_per_bag: usize,
    pub k: usize,
    pub class_weighting: bool,
    pub attention_dim: usize,
    pub head_widths: Vec<usize>,
    pub fusion: FusionKind,
    pub fused_dim: usize,
    pub fusion_attention_dim: usize,
    pub bag_unit: BagUnit,
    /// Decision threshold for the confusion-table metrics.
    pub threshold: f64,
    /// Extractor order for fusion; empty means the dataset's order.
    pub extractors: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            patches_per_bag: DEFAULT_PATCHES_PER_BAG,
            k: DEFAULT_FOLDS,
            class_weighting: true,
            attention_dim: DEFAULT_ATTENTION_DIM,
            head_widths: DEFAULT_HEAD_WIDTHS.to_vec(),
            fusion: FusionKind::Concat,
            fused_dim: DEFAULT_FUSED_DIM,
            fusion_attention_dim: DEFAULT_FUSION_ATTENTION_DIM,
            bag_unit: BagUnit::Slide,
            threshold: 0.5,
            extractors: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// A learning rate of exactly 0 is accepted (a frozen run); negative or
    /// non-finite rates are not.
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.patches_per_bag == 0 {
            return Err(Error::Config("patches_per_bag must be at least 1".into()));
        }
        if self.attention_dim == 0 || self.head_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.fusion == FusionKind::Attention && (self.fused_dim == 0 || self.fusion_attention_dim == 0) {
            return Err(Error::Config("fusion widths must be positive".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        if let OptimizerConfig::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
                return Err(Error::Config("Adam needs 0 <= beta < 1 and epsilon > 0".into()));
            }
        }
        Ok(())
    }

    pub fn model_shape(&self, extractor_dims: &[usize]) -> ModelShape {
        ModelShape {
            extractor_dims: extractor_dims.to_vec(),
            attention_dim: self.attention_dim,
            head_widths: self.head_widths.clone(),
            fusion: (self.fusion == FusionKind::Attention).then_some(FusionShape {
                fused_dim: self.fused_dim,
                attention_dim: self.fusion_attention_dim,
            }),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::embedding::sha256_hex(&json)
    }
}
