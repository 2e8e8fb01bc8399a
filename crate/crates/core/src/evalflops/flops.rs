//! Analytical prefill cost of baseline and pruned inference.
//!
//! Only matrix multiplications are counted, at 2 FLOPs per
//! multiply-accumulate. Per layer at sequence length `S` the projections
//! cost `8·S·D²`, attention scores and context `4·S²·D` and the gated FFN
//! `6·S·D·F`.

use serde::{Deserialize, Serialize};

use crate::engine::PruningMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CONVENTION: &str = "mac2_matmul_only";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsModel {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub tokens_per_page: usize,
    pub query_len: usize,
    pub retrieval_layer: usize,
    pub top_k: usize,
    /// Encoder FLOPs per page.
    pub c_enc: f64,
    pub proj_dim_1: usize,
    pub proj_dim_2: usize,
    pub convention: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetFile {
    model: FlopsModel,
    #[allow(dead_code)]
    derivation: Vec<String>,
}

const FULL_SCALE_PRESET: &str = include_str!("../../data/full_scale_preset.json");

impl FlopsModel {
    /// Cost model of the toy transformer, which has no page encoder.
    pub fn toy(cfg: &ModelConfig, tokens_per_page: usize, query_len: usize) -> Self {
        FlopsModel {
            n_layers: cfg.n_layers,
            hidden_dim: cfg.hidden_dim,
            ffn_dim: cfg.ffn_dim,
            n_heads: cfg.n_heads,
            tokens_per_page,
            query_len,
            retrieval_layer: cfg.retrieval_layer,
            top_k: cfg.top_k,
            c_enc: 0.0,
            proj_dim_1: cfg.proj_dim_1,
            proj_dim_2: cfg.proj_dim_2,
            convention: CONVENTION.into(),
        }
    }

    /// The shipped 7B-scale preset; its derivation is recorded in the data
    /// file next to the numbers.
    pub fn full_scale() -> Result<Self> {
        let preset: PresetFile = serde_json::from_str(FULL_SCALE_PRESET)?;
        preset.model.validate()?;
        Ok(preset.model)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("n_heads", self.n_heads),
            ("tokens_per_page", self.tokens_per_page),
            ("query_len", self.query_len),
            ("retrieval_layer", self.retrieval_layer),
            ("top_k", self.top_k),
            ("proj_dim_1", self.proj_dim_1),
            ("proj_dim_2", self.proj_dim_2),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("flops.{name}"), "must be positive"));
            }
        }
        if self.retrieval_layer >= self.n_layers {
            return Err(Error::config("flops.retrieval_layer", "must be below n_layers"));
        }
        if !(self.c_enc >= 0.0) || !self.c_enc.is_finite() {
            return Err(Error::config("flops.c_enc", "must be finite and nonnegative"));
        }
        if self.convention != CONVENTION {
            return Err(Error::config("flops.convention", format!("only `{CONVENTION}` is supported")));
        }
        Ok(())
    }

    fn layer(&self, s: f64) -> f64 {
        let d = self.hidden_dim as f64;
        8.0 * s * d * d + 4.0 * s * s * d + 6.0 * s * d * self.ffn_dim as f64
    }
}

/// Prefill FLOPs for a document of `n_pages` pages.
pub fn flops_estimate(model: &FlopsModel, n_pages: usize, mode: PruningMode) -> Result<f64> {
    model.validate()?;
    if n_pages == 0 {
        return Err(Error::Invalid("cost of a document without pages".into()));
    }
    let tpp = model.tokens_per_page as f64;
    let q = model.query_len as f64;
    let s_full = n_pages as f64 * tpp + q;
    let encoder = n_pages as f64 * model.c_enc;
    let layers = model.n_layers as f64;
    let cost = match mode {
        PruningMode::Baseline => layers * model.layer(s_full) + encoder,
        PruningMode::Urag => {
            let r = model.retrieval_layer as f64;
            let s_pruned = model.top_k.min(n_pages) as f64 * tpp + q;
            let (d, d1, d2) = (model.hidden_dim as f64, model.proj_dim_1 as f64, model.proj_dim_2 as f64);
            let module = s_full * (2.0 * d * d1 + 2.0 * d1 * d2);
            let scoring = 2.0 * q * n_pages as f64 * tpp * d2;
            r * model.layer(s_full) + (layers - r) * model.layer(s_pruned) + module + scoring + encoder
        }
    };
    Ok(cost)
}

/// `100·(1 − urag / baseline)`; negative when pruning removes nothing.
pub fn reduction(model: &FlopsModel, n_pages: usize) -> Result<f64> {
    let base = flops_estimate(model, n_pages, PruningMode::Baseline)?;
    let urag = flops_estimate(model, n_pages, PruningMode::Urag)?;
    Ok(100.0 * (1.0 - urag / base))
}

/// One line of the FLOPs sweep CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub n_pages: usize,
    pub baseline_flops: f64,
    pub urag_flops: f64,
    pub reduction_pct: f64,
}

pub fn flops_sweep(model: &FlopsModel, page_counts: &[usize]) -> Result<Vec<FlopsRow>> {
    page_counts
        .iter()
        .map(|&n| {
            let baseline_flops = flops_estimate(model, n, PruningMode::Baseline)?;
            let urag_flops = flops_estimate(model, n, PruningMode::Urag)?;
            Ok(FlopsRow {
                n_pages: n,
                baseline_flops,
                urag_flops,
                reduction_pct: 100.0 * (1.0 - urag_flops / baseline_flops),
            })
        })
        .collect()
}
