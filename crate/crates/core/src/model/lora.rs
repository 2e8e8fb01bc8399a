use crate::error::Result;
use crate::numerics::{matmul, Matrix, Rng};

use super::config::ModelConfig;
use super::weights::{Proj, TransformerWeights};

/// Low-rank additive update `W + scale · (B·A)ᵀ` for a row-vector map
/// `y = x·W` with `W` of shape in×out.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// rank × in
    pub a: Matrix,
    /// out × rank
    pub b: Matrix,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    /// `A` uniform in ±1/√in, `B` zero, so the adapted map starts equal to
    /// the base map.
    pub fn new(input: usize, output: usize, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let rank = cfg.lora_rank.min(input).min(output);
        let bound = 1.0 / (input as f64).sqrt();
        let data = (0..rank * input).map(|_| (2.0 * rng.next_f64() - 1.0) * bound).collect();
        LoraAdapter {
            a: Matrix::from_vec(rank, input, data).expect("length matches"),
            b: Matrix::zeros(output, rank),
            scale: cfg.lora_alpha / rank as f64,
            dropout: cfg.lora_dropout,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// The dense in×out update this adapter adds to its base weight.
    pub fn delta(&self) -> Result<Matrix> {
        let ba = matmul(&self.b, &self.a)?;
        Ok(ba.transpose().scaled(self.scale))
    }
}

/// Adapters on Q, K, V and O of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet {
    pub layers: Vec<[LoraAdapter; 4]>,
}

impl LoraSet {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.hidden_dim;
        let layers = (0..cfg.n_layers)
            .map(|_| Proj::ALL.map(|_| LoraAdapter::new(d, d, cfg, rng)))
            .collect();
        LoraSet { layers }
    }

    pub fn get(&self, layer: usize, p: Proj) -> &LoraAdapter {
        &self.layers[layer][p.index()]
    }

    /// Parameters in binding order: per layer, per projection, `A` then `B`.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (l, adapters) in self.layers.iter_mut().enumerate() {
            for (p, ad) in Proj::ALL.iter().zip(adapters.iter_mut()) {
                out.push((format!("lora.layers.{l}.{}.a", p.name()), &mut ad.a));
                out.push((format!("lora.layers.{l}.{}.b", p.name()), &mut ad.b));
            }
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, adapters) in self.layers.iter().enumerate() {
            for (p, ad) in Proj::ALL.iter().zip(adapters.iter()) {
                out.push((format!("lora.layers.{l}.{}.a", p.name()), &ad.a));
                out.push((format!("lora.layers.{l}.{}.b", p.name()), &ad.b));
            }
        }
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.named_tensors().iter().map(|(_, m)| m.shape()).collect()
    }

    /// Base weights with every adapter folded in.
    pub fn merge_into(&self, base: &TransformerWeights) -> Result<TransformerWeights> {
        let mut merged = base.clone();
        for (block, adapters) in merged.blocks.iter_mut().zip(&self.layers) {
            for (p, ad) in Proj::ALL.iter().zip(adapters) {
                block.proj_mut(*p).add_assign(&ad.delta()?);
            }
        }
        Ok(merged)
    }
}
