use serde::{Deserialize, Serialize};

use crate::{DietError, Result};

/// Which terms of the total loss are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub intent: bool,
    pub entity: bool,
    pub mask: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            intent: true,
            entity: true,
            mask: true,
        }
    }
}

impl LossToggles {
    pub fn any(&self) -> bool {
        self.intent || self.entity || self.mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub intent: f64,
    pub entity: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            intent: 1.0,
            entity: 1.0,
            mask: 1.0,
        }
    }
}

/// Masked-token corruption probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub select_rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
    /// Exclude selected positions from the CRF loss.
    pub exclude_from_crf: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            select_rate: 0.15,
            mask_prob: 0.7,
            random_prob: 0.1,
            exclude_from_crf: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub transformer_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub ffn_activation: Activation,
    /// Relative positions are clipped to `[-k, k]`.
    pub max_relative_position: usize,
    pub embed_dim: usize,
    /// Output width of the sparse projection. `None` matches the dense
    /// feature width when dense features exist, else 128.
    pub sparse_projection_dim: Option<usize>,
    pub use_sparse: bool,
    pub sparse_dropout: f64,
    pub transformer_dropout: f64,
    pub attention_dropout: f64,
    pub num_negatives: usize,
    pub layer_norm_eps: f64,
    pub losses: LossToggles,
    pub loss_weights: LossWeights,
    pub masking: MaskConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            transformer_dim: 256,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 512,
            ffn_activation: Activation::Relu,
            max_relative_position: 5,
            embed_dim: 20,
            sparse_projection_dim: None,
            use_sparse: true,
            sparse_dropout: 0.5,
            transformer_dropout: 0.1,
            attention_dropout: 0.0,
            num_negatives: 20,
            layer_norm_eps: 1e-6,
            losses: LossToggles::default(),
            loss_weights: LossWeights::default(),
            masking: MaskConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DietError::Config(m));
        if self.num_heads == 0 || !self.transformer_dim.is_multiple_of(self.num_heads) {
            return err(format!(
                "transformer_dim {} is not divisible by num_heads {}",
                self.transformer_dim, self.num_heads
            ));
        }
        if self.embed_dim == 0 || self.ffn_dim == 0 || self.transformer_dim == 0 {
            return err("dimensions must be positive".into());
        }
        if !self.losses.any() {
            return err(
                "at least one of the intent, entity and mask losses must be enabled".into(),
            );
        }
        for (name, r) in [
            ("sparse_dropout", self.sparse_dropout),
            ("transformer_dropout", self.transformer_dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return err(format!("{name} {r} outside [0, 1)"));
            }
        }
        let m = &self.masking;
        if !(0.0..=1.0).contains(&m.select_rate)
            || m.mask_prob < 0.0
            || m.random_prob < 0.0
            || m.mask_prob + m.random_prob > 1.0
        {
            return err("masking probabilities out of range".into());
        }
        if self.sparse_projection_dim == Some(0) {
            return err("sparse_projection_dim must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.transformer_dim / self.num_heads
    }
}

/// Data-dependent sizes fixed when a model is created.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub sparse_dim: Option<usize>,
    pub dense_dim: Option<usize>,
    pub num_intents: usize,
    pub num_tags: usize,
}
