use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{randn, Matrix, Rng};

use super::config::ModelConfig;

/// Attention projections that can carry a low-rank adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One pre-norm block. Linear maps act on row vectors: `y = x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl BlockWeights {
    pub fn proj(&self, p: Proj) -> &Matrix {
        match p {
            Proj::Q => &self.wq,
            Proj::K => &self.wk,
            Proj::V => &self.wv,
            Proj::O => &self.wo,
        }
    }

    pub fn proj_mut(&mut self, p: Proj) -> &mut Matrix {
        match p {
            Proj::Q => &mut self.wq,
            Proj::K => &mut self.wk,
            Proj::V => &mut self.wv,
            Proj::O => &mut self.wo,
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    pub vis_embed: Matrix,
    pub txt_embed: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Matrix,
    pub head: Matrix,
}

impl TransformerWeights {
    /// Gaussian initialisation with fan-in scaling and unit norm gains.
    pub fn random(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockWeights {
                attn_norm: Matrix::filled(1, d, 1.0),
                wq: randn(d, d, sd, rng),
                wk: randn(d, d, sd, rng),
                wv: randn(d, d, sd, rng),
                wo: randn(d, d, sd, rng),
                ffn_norm: Matrix::filled(1, d, 1.0),
                w_gate: randn(d, f, sd, rng),
                w_up: randn(d, f, sd, rng),
                w_down: randn(f, d, sf, rng),
            })
            .collect();
        TransformerWeights {
            vis_embed: randn(cfg.v_vis, d, 1.0, rng),
            txt_embed: randn(cfg.v_txt, d, 1.0, rng),
            blocks,
            final_norm: Matrix::filled(1, d, 1.0),
            head: randn(d, cfg.v_txt, sd, rng),
        }
    }

    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let d = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        let mut out = vec![
            ("vis_embed".to_string(), (cfg.v_vis, d)),
            ("txt_embed".to_string(), (cfg.v_txt, d)),
        ];
        for l in 0..cfg.n_layers {
            for (name, shape) in [
                ("attn_norm", (1, d)),
                ("wq", (d, d)),
                ("wk", (d, d)),
                ("wv", (d, d)),
                ("wo", (d, d)),
                ("ffn_norm", (1, d)),
                ("w_gate", (d, f)),
                ("w_up", (d, f)),
                ("w_down", (f, d)),
            ] {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("final_norm".to_string(), (1, d)));
        out.push(("head".to_string(), (d, cfg.v_txt)));
        out
    }

    /// Tensors in a fixed order with their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("vis_embed".to_string(), &self.vis_embed),
            ("txt_embed".to_string(), &self.txt_embed),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, m) in b.tensors() {
                out.push((format!("layers.{l}.{name}"), m));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Rebuilds weights from named tensors, checking every expected shape.
    pub fn from_named(cfg: &ModelConfig, tensors: &mut BTreeMap<String, Matrix>) -> Result<Self> {
        for (name, shape) in Self::expected_shapes(cfg) {
            match tensors.get(&name) {
                Some(m) if m.shape() == shape => {}
                Some(m) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        m.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        let mut take = |name: String| tensors.remove(&name).expect("presence checked above");
        let vis_embed = take("vis_embed".into());
        let txt_embed = take("txt_embed".into());
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockWeights {
                attn_norm: take(format!("layers.{l}.attn_norm")),
                wq: take(format!("layers.{l}.wq")),
                wk: take(format!("layers.{l}.wk")),
                wv: take(format!("layers.{l}.wv")),
                wo: take(format!("layers.{l}.wo")),
                ffn_norm: take(format!("layers.{l}.ffn_norm")),
                w_gate: take(format!("layers.{l}.w_gate")),
                w_up: take(format!("layers.{l}.w_up")),
                w_down: take(format!("layers.{l}.w_down")),
            })
            .collect();
        let final_norm = take("final_norm".into());
        let head = take("head".into());
        Ok(TransformerWeights { vis_embed, txt_embed, blocks, final_norm, head })
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::expected_shapes(cfg);
        let actual = self.named_tensors();
        if expected.len() != actual.len() {
            return Err(Error::Invalid(format!(
                "{} tensors, config implies {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((name, shape), (_, m)) in expected.iter().zip(&actual) {
            if m.shape() != *shape {
                return Err(Error::Invalid(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Invalid(format!("tensor `{name}` has non-finite entries")));
            }
        }
        Ok(())
    }
}
