use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::scenario::{N_SLOTS, SEQ_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_slots: usize,
    pub init_std: f64,
    pub seed: u64,
    pub activation: Activation,
    pub layer_norm_eps: f64,
    /// Applied to attention and feed-forward outputs during training only.
    pub dropout: f64,
    /// Hide `[PAD]` keys from attention.
    pub pad_masking: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: 29,
            seq_len: SEQ_LEN,
            n_slots: N_SLOTS,
            init_std: 0.02,
            seed: 0,
            activation: Activation::Gelu,
            layer_norm_eps: 1e-5,
            dropout: 0.0,
            pad_masking: false,
        }
    }
}

pub(crate) const TENSORS_PER_LAYER: usize = 16;

const LAYER_TENSOR_NAMES: [&str; TENSORS_PER_LAYER] = [
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln1.gain",
    "ln1.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.gain", "ln2.bias",
];

/// What a parameter tensor is, for initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamKind {
    Weight,
    Bias,
    Gain,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("n_slots", self.n_slots),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(ModelError::Config("init_std must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(ModelError::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Name, shape and kind of every parameter tensor, in storage order.
    pub(crate) fn layout(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        use ParamKind::*;
        let (d, f, v) = (self.d_model, self.d_ffn, self.vocab_size);
        let mut out = vec![
            ("embed.token".to_string(), vec![v, d], Weight),
            ("embed.position".to_string(), vec![self.seq_len, d], Weight),
            ("embed.slot".to_string(), vec![self.n_slots, d], Weight),
        ];
        for layer in 0..self.n_layers {
            let shapes: [(Vec<usize>, ParamKind); TENSORS_PER_LAYER] = [
                (vec![d, d], Weight),
                (vec![d], Bias),
                (vec![d, d], Weight),
                (vec![d], Bias),
                (vec![d, d], Weight),
                (vec![d], Bias),
                (vec![d, d], Weight),
                (vec![d], Bias),
                (vec![d], Gain),
                (vec![d], Bias),
                (vec![d, f], Weight),
                (vec![f], Bias),
                (vec![f, d], Weight),
                (vec![d], Bias),
                (vec![d], Gain),
                (vec![d], Bias),
            ];
            for (name, (shape, kind)) in LAYER_TENSOR_NAMES.iter().zip(shapes) {
                out.push((format!("layer{layer}.{name}"), shape, kind));
            }
        }
        out.push(("head.bias".to_string(), vec![v], Bias));
        out
    }

    /// Closed-form parameter count:
    /// `(V + T + S)·d + L·(4d² + 2·d·f + 9d + f) + V`.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ffn, self.vocab_size);
        (v + self.seq_len + self.n_slots) * d + self.n_layers * (4 * d * d + 2 * d * f + 9 * d + f) + v
    }
}
