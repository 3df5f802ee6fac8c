use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// Dimensions that determine the trainable parameter count of a BERT-shaped
/// encoder classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDims {
    pub vocab_size: u64,
    pub max_positions: u64,
    pub type_vocab_size: u64,
    pub d_model: u64,
    pub d_ff: u64,
    pub n_layers: u64,
    pub n_classes: u64,
    pub pooler: bool,
}

impl ParamDims {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        ParamDims {
            vocab_size: cfg.vocab_size as u64,
            max_positions: cfg.max_seq_len as u64,
            type_vocab_size: 0,
            d_model: cfg.d_model as u64,
            d_ff: cfg.d_ff as u64,
            n_layers: cfg.n_layers as u64,
            n_classes: cfg.n_classes as u64,
            pooler: true,
        }
    }

    /// bert-base-uncased with a sequence-classification head.
    pub fn bert_base_reference(n_classes: u64) -> Self {
        ParamDims {
            vocab_size: 30522,
            max_positions: 512,
            type_vocab_size: 2,
            d_model: 768,
            d_ff: 3072,
            n_layers: 12,
            n_classes,
            pooler: true,
        }
    }

    pub fn embedding_params(&self) -> u64 {
        let d = self.d_model;
        (self.vocab_size + self.max_positions + self.type_vocab_size) * d + 2 * d
    }

    /// Q, K, V, O projections with biases, the two FFN matrices with biases,
    /// and two layernorms.
    pub fn per_layer_params(&self) -> u64 {
        let (d, f) = (self.d_model, self.d_ff);
        4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d)
    }

    pub fn head_params(&self) -> u64 {
        let d = self.d_model;
        let pooler = if self.pooler { d * d + d } else { 0 };
        pooler + d * self.n_classes + self.n_classes
    }
}

/// Trainable parameters with every layer flagged in `prune_mask` removed.
/// Missing mask entries count as live.
pub fn param_count(dims: &ParamDims, prune_mask: &[bool]) -> u64 {
    let pruned = prune_mask.iter().filter(|&&p| p).count() as u64;
    let live = dims.n_layers.saturating_sub(pruned);
    dims.embedding_params() + live * dims.per_layer_params() + dims.head_params()
}

/// Size in GiB at 32-bit weights.
pub fn size_gb(params: u64) -> f64 {
    size_gb_at(params, 4)
}

pub fn size_gb_at(params: u64, bytes_per_param: u64) -> f64 {
    (params * bytes_per_param) as f64 / (1u64 << 30) as f64
}
