use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Layer whose input hidden states feed the retrieval module; pruning
    /// takes effect from this layer on.
    pub retrieval_layer: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub v_vis: usize,
    pub v_txt: usize,
    pub max_seq_len: usize,
    pub proj_dim_1: usize,
    pub proj_dim_2: usize,
    pub top_k: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub rope_base: f64,
    pub rms_eps: f64,
    /// Renumber rotary positions of pruned sequences from zero (ablation).
    pub reindex_positions: bool,
    pub max_decode_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            retrieval_layer: 3,
            hidden_dim: 128,
            n_heads: 4,
            head_dim: 32,
            ffn_dim: 256,
            v_vis: 512,
            v_txt: 256,
            max_seq_len: 512,
            proj_dim_1: 64,
            proj_dim_2: 32,
            top_k: 5,
            lora_rank: 32,
            lora_alpha: 64.0,
            lora_dropout: 0.1,
            rope_base: 1e6,
            rms_eps: 1e-6,
            reindex_positions: false,
            max_decode_steps: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("v_vis", self.v_vis),
            ("v_txt", self.v_txt),
            ("max_seq_len", self.max_seq_len),
            ("proj_dim_1", self.proj_dim_1),
            ("proj_dim_2", self.proj_dim_2),
            ("top_k", self.top_k),
            ("lora_rank", self.lora_rank),
            ("max_decode_steps", self.max_decode_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if self.retrieval_layer == 0 || self.retrieval_layer >= self.n_layers {
            return Err(Error::config(
                "model.retrieval_layer",
                format!("must lie in 1..{}", self.n_layers),
            ));
        }
        if self.n_heads * self.head_dim != self.hidden_dim {
            return Err(Error::config(
                "model.head_dim",
                format!("{} heads x {} != hidden_dim {}", self.n_heads, self.head_dim, self.hidden_dim),
            ));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::config("model.head_dim", "rotary pairs need an even head width"));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::config("model.lora_dropout", "must lie in [0, 1)"));
        }
        if !(self.lora_alpha > 0.0) {
            return Err(Error::config("model.lora_alpha", "must be positive"));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::config("model.rope_base", "must exceed 1"));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::config("model.rms_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}
