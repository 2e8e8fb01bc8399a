//! Embedding, transformer blocks, output head and greedy decoding, all built
//! on the differentiation tape so training and inference share one code path.

use std::ops::Range;

use crate::corpus::SyntheticDocument;
use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix, RopeSpec, Rng, Tape, Var};
use crate::retrieval::RetrievalResult;

use super::config::ModelConfig;
use super::layout::SequenceLayout;
use super::lora::LoraSet;
use super::weights::{Proj, TransformerWeights};

/// A LoRA adapter placed on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundAdapter {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub attn_norm: Var,
    pub proj: [Var; 4],
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
    pub lora: Option<[BoundAdapter; 4]>,
}

/// Model weights placed on a tape. Base weights are constants; adapters are
/// differentiable when bound for training.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vis_embed: Var,
    pub txt_embed: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_norm: Var,
    pub head: Var,
    /// Adapter leaves in [`LoraSet::params_mut`] order.
    pub lora_params: Vec<Var>,
    pub n_heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
    pub rms_eps: f64,
    pub reindex_positions: bool,
}

impl BoundModel {
    pub fn bind(
        tape: &mut Tape,
        cfg: &ModelConfig,
        weights: &TransformerWeights,
        lora: Option<&LoraSet>,
        train_lora: bool,
    ) -> Self {
        let mut lora_params = Vec::new();
        let blocks = weights
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let adapters = lora.map(|set| {
                    Proj::ALL.map(|p| {
                        let ad = set.get(l, p);
                        let a = tape.leaf(ad.a.clone(), train_lora);
                        let bv = tape.leaf(ad.b.clone(), train_lora);
                        lora_params.push(a);
                        lora_params.push(bv);
                        BoundAdapter { a, b: bv, scale: ad.scale, dropout: ad.dropout }
                    })
                });
                BoundBlock {
                    attn_norm: tape.constant(b.attn_norm.clone()),
                    proj: Proj::ALL.map(|p| tape.constant(b.proj(p).clone())),
                    ffn_norm: tape.constant(b.ffn_norm.clone()),
                    w_gate: tape.constant(b.w_gate.clone()),
                    w_up: tape.constant(b.w_up.clone()),
                    w_down: tape.constant(b.w_down.clone()),
                    lora: adapters,
                }
            })
            .collect();
        BoundModel {
            vis_embed: tape.constant(weights.vis_embed.clone()),
            txt_embed: tape.constant(weights.txt_embed.clone()),
            blocks,
            final_norm: tape.constant(weights.final_norm.clone()),
            head: tape.constant(weights.head.clone()),
            lora_params,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
            rope_base: cfg.rope_base,
            rms_eps: cfg.rms_eps,
            reindex_positions: cfg.reindex_positions,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }
}

/// Per-layer keys (after rotary phases) and values of the tokens processed
/// so far.
#[derive(Clone, Debug)]
pub struct KvCache {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

impl KvCache {
    pub fn new(n_layers: usize, hidden_dim: usize) -> Self {
        KvCache {
            keys: (0..n_layers).map(|_| Matrix::zeros(0, hidden_dim)).collect(),
            values: (0..n_layers).map(|_| Matrix::zeros(0, hidden_dim)).collect(),
        }
    }

    pub fn len_at(&self, layer: usize) -> usize {
        self.keys[layer].rows()
    }

    /// Keeps only the listed rows (ascending) in the given layers.
    pub fn retain_rows(&mut self, layers: Range<usize>, rows: &[usize]) -> Result<()> {
        for l in layers {
            if let Some(&bad) = rows.iter().find(|&&r| r >= self.keys[l].rows()) {
                return Err(Error::Invalid(format!(
                    "cache row {bad} beyond {} cached rows at layer {l}",
                    self.keys[l].rows()
                )));
            }
            self.keys[l] = self.keys[l].gather_rows(rows);
            self.values[l] = self.values[l].gather_rows(rows);
        }
        Ok(())
    }
}

/// Counters that make the single-pass structure observable.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub model_instances: usize,
    pub prefill_passes: usize,
    pub retrieval_calls: usize,
    pub decode_steps: usize,
    /// Multiply-accumulates spent in the prefill pass.
    pub prefill_macs: u64,
}

/// Retained internals of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `hidden[l]` is the input to block `l`; the last entry is the output of
    /// the final block. Entries are `None` unless retention was requested.
    pub hidden: Vec<Option<Matrix>>,
    /// Per layer, per head attention probabilities when retained.
    pub attention: Vec<Option<Vec<Matrix>>>,
    pub layout: SequenceLayout,
    /// Layout seen by layers at and after `pruned_from` when pruning ran.
    pub pruned_layout: Option<SequenceLayout>,
    pub pruned_from: usize,
    pub retrieval: Option<RetrievalResult>,
    pub stats: ForwardStats,
}

impl ForwardTrace {
    pub fn new(n_layers: usize, layout: SequenceLayout) -> Self {
        ForwardTrace {
            hidden: vec![None; n_layers + 1],
            attention: vec![None; n_layers],
            layout,
            pruned_layout: None,
            pruned_from: n_layers,
            retrieval: None,
            stats: ForwardStats::default(),
        }
    }

    /// Layout of the rows entering `layer`.
    pub fn layout_at(&self, layer: usize) -> &SequenceLayout {
        match &self.pruned_layout {
            Some(p) if layer >= self.pruned_from => p,
            _ => &self.layout,
        }
    }
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub retain_hidden: bool,
    pub retain_attention: bool,
    /// Enables adapter-input dropout; training only.
    pub dropout_rng: Option<&'a mut Rng>,
}

/// Checks token ranges and sequence length, and builds the layout.
pub fn layout_for(doc: &SyntheticDocument, cfg: &ModelConfig, with_answer: bool) -> Result<SequenceLayout> {
    let tpp = doc.tokens_per_page();
    if doc.pages.iter().any(|p| p.tokens.len() != tpp) || tpp == 0 {
        return Err(Error::Invalid(format!("document {} has ragged or empty pages", doc.doc_id)));
    }
    let answer_len = if with_answer { doc.answer.len() } else { 0 };
    let layout = SequenceLayout::contiguous(doc.n_pages(), tpp, doc.query.len(), answer_len);
    if layout.len() > cfg.max_seq_len {
        return Err(Error::Invalid(format!(
            "document {} needs {} positions, max_seq_len is {}",
            doc.doc_id,
            layout.len(),
            cfg.max_seq_len
        )));
    }
    for p in &doc.pages {
        if let Some(&bad) = p.tokens.iter().find(|&&t| t >= cfg.v_vis) {
            return Err(Error::Invalid(format!("visual token {bad} >= v_vis {}", cfg.v_vis)));
        }
    }
    let text = doc.query.iter().chain(if with_answer { &doc.answer[..] } else { &[] });
    if let Some(&bad) = text.into_iter().find(|&&t| t >= cfg.v_txt) {
        return Err(Error::Invalid(format!("text token {bad} >= v_txt {}", cfg.v_txt)));
    }
    Ok(layout)
}

/// Page tokens from the visual table, then the query (and answer) from the
/// text table.
pub fn embed(
    tape: &mut Tape,
    bound: &BoundModel,
    doc: &SyntheticDocument,
    cfg: &ModelConfig,
    with_answer: bool,
) -> Result<(Var, SequenceLayout)> {
    let layout = layout_for(doc, cfg, with_answer)?;
    let vis_ids: Vec<usize> = doc.pages.iter().flat_map(|p| p.tokens.iter().copied()).collect();
    let mut txt_ids = doc.query.clone();
    if with_answer {
        txt_ids.extend_from_slice(&doc.answer);
    }
    let vis = tape.gather_rows(bound.vis_embed, vis_ids)?;
    let txt = tape.gather_rows(bound.txt_embed, txt_ids)?;
    let h = tape.concat_rows(vec![vis, txt])?;
    Ok((h, layout))
}

/// Embedding matrix and layout for a document, off-tape.
pub fn embed_matrix(
    doc: &SyntheticDocument,
    weights: &TransformerWeights,
    cfg: &ModelConfig,
    with_answer: bool,
) -> Result<(Matrix, SequenceLayout)> {
    let layout = layout_for(doc, cfg, with_answer)?;
    let vis_ids: Vec<usize> = doc.pages.iter().flat_map(|p| p.tokens.iter().copied()).collect();
    let mut txt_ids = doc.query.clone();
    if with_answer {
        txt_ids.extend_from_slice(&doc.answer);
    }
    let h = Matrix::concat_rows(&[
        &weights.vis_embed.gather_rows(&vis_ids),
        &weights.txt_embed.gather_rows(&txt_ids),
    ])?;
    Ok((h, layout))
}

/// `x·W`, plus the adapter path `scale · drop(x)·Aᵀ·Bᵀ` when an adapter is
/// bound. Dropout is drawn only when a generator is supplied.
pub fn adapted_linear(
    tape: &mut Tape,
    x: Var,
    w: Var,
    adapter: Option<&BoundAdapter>,
    dropout_rng: &mut Option<&mut Rng>,
) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    let Some(ad) = adapter else { return Ok(base) };
    let mut input = x;
    if let Some(rng) = dropout_rng.as_deref_mut() {
        if ad.dropout > 0.0 {
            let (r, c) = tape.value(x).shape();
            let keep = 1.0 / (1.0 - ad.dropout);
            let mask: Vec<f64> =
                (0..r * c).map(|_| if rng.bernoulli(ad.dropout) { 0.0 } else { keep }).collect();
            let m = tape.constant(Matrix::from_vec(r, c, mask)?);
            input = tape.mul(x, m)?;
        }
    }
    let down = tape.matmul_bt(input, ad.a)?;
    let up = tape.matmul_bt(down, ad.b)?;
    let up = tape.scale(up, ad.scale);
    tape.add(base, up)
}

/// Runs blocks `layers` on hidden states `h` whose rows carry the given
/// rotary positions. With a cache, the new rows attend to the cached rows
/// plus themselves, and their keys and values are appended.
#[allow(clippy::too_many_arguments)]
pub fn forward_layers(
    tape: &mut Tape,
    mut h: Var,
    positions: &[usize],
    bound: &BoundModel,
    layers: Range<usize>,
    opts: &mut ForwardOptions,
    mut trace: Option<&mut ForwardTrace>,
    mut cache: Option<&mut KvCache>,
) -> Result<Var> {
    if layers.end > bound.n_layers() || layers.start > layers.end {
        return Err(Error::Invalid(format!(
            "layer range {layers:?} outside 0..{}",
            bound.n_layers()
        )));
    }
    let rows = tape.value(h).rows();
    if positions.len() != rows {
        return Err(Error::Invalid(format!("{} positions for {rows} rows", positions.len())));
    }
    if let Some(c) = cache.as_deref() {
        if c.keys.len() != bound.n_layers() {
            return Err(Error::Invalid(format!(
                "cache holds {} layers, model has {}",
                c.keys.len(),
                bound.n_layers()
            )));
        }
        let d = tape.value(h).cols();
        for l in layers.clone() {
            if c.keys[l].cols() != d || c.keys[l].rows() != c.values[l].rows() {
                return Err(Error::Invalid(format!("cache layer {l} is inconsistent")));
            }
        }
    }
    let rope = RopeSpec {
        positions: positions.to_vec(),
        n_heads: bound.n_heads,
        head_dim: bound.head_dim,
        base: bound.rope_base,
    };
    for l in layers {
        let blk = &bound.blocks[l];
        if let Some(t) = trace.as_deref_mut() {
            if opts.retain_hidden {
                t.hidden[l] = Some(tape.value(h).clone());
            }
        }
        let lora = blk.lora.as_ref();
        let n1 = tape.rms_norm(h, blk.attn_norm, bound.rms_eps)?;
        let q = adapted_linear(tape, n1, blk.proj[0], lora.map(|a| &a[0]), &mut opts.dropout_rng)?;
        let k = adapted_linear(tape, n1, blk.proj[1], lora.map(|a| &a[1]), &mut opts.dropout_rng)?;
        let v = adapted_linear(tape, n1, blk.proj[2], lora.map(|a| &a[2]), &mut opts.dropout_rng)?;
        let q = tape.rope(q, rope.clone())?;
        let k = tape.rope(k, rope.clone())?;
        let (k_all, v_all) = match cache.as_deref_mut() {
            Some(c) => {
                let ck = tape.constant(c.keys[l].clone());
                let cv = tape.constant(c.values[l].clone());
                c.keys[l] = Matrix::concat_rows(&[&c.keys[l], tape.value(k)])?;
                c.values[l] = Matrix::concat_rows(&[&c.values[l], tape.value(v)])?;
                (tape.concat_rows(vec![ck, k])?, tape.concat_rows(vec![cv, v])?)
            }
            None => (k, v),
        };
        let att = tape.causal_attention(q, k_all, v_all, bound.n_heads)?;
        if let Some(t) = trace.as_deref_mut() {
            if opts.retain_attention {
                t.attention[l] = tape.attention_probs(att).map(|p| p.to_vec());
            }
        }
        let o = adapted_linear(tape, att, blk.proj[3], lora.map(|a| &a[3]), &mut opts.dropout_rng)?;
        let h1 = tape.add(h, o)?;
        let n2 = tape.rms_norm(h1, blk.ffn_norm, bound.rms_eps)?;
        let gate = tape.matmul(n2, blk.w_gate)?;
        let gate = tape.silu(gate);
        let up = tape.matmul(n2, blk.w_up)?;
        let act = tape.mul(gate, up)?;
        let down = tape.matmul(act, blk.w_down)?;
        h = tape.add(h1, down)?;
        if let Some(t) = trace.as_deref_mut() {
            if opts.retain_hidden {
                t.hidden[l + 1] = Some(tape.value(h).clone());
            }
        }
    }
    Ok(h)
}

/// Output-head logits for the listed rows of the final hidden states.
pub fn lm_logits(tape: &mut Tape, h_final: Var, bound: &BoundModel, rows: Option<Vec<usize>>) -> Result<Var> {
    let h = match rows {
        Some(r) => tape.gather_rows(h_final, r)?,
        None => h_final,
    };
    let n = tape.rms_norm(h, bound.final_norm, bound.rms_eps)?;
    tape.matmul(n, bound.head)
}

/// Greedy continuation from a prefilled cache. `first_logits` are the logits
/// at the last prefilled row; `next_position` is the rotary position of the
/// first generated token. Stops at `eos` or after `max_steps` tokens; the
/// returned sequence excludes `eos`.
#[allow(clippy::too_many_arguments)]
pub fn greedy_decode(
    bound_weights: &TransformerWeights,
    cfg: &ModelConfig,
    lora: Option<&LoraSet>,
    cache: &mut KvCache,
    first_logits: &[f64],
    next_position: usize,
    eos: usize,
    stats: &mut ForwardStats,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut token = argmax(first_logits);
    let mut pos = next_position;
    while token != eos && out.len() < cfg.max_decode_steps {
        out.push(token);
        if out.len() == cfg.max_decode_steps {
            break;
        }
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, cfg, bound_weights, lora, false);
        let h = tape.gather_rows(bound.txt_embed, vec![token])?;
        let mut opts = ForwardOptions::default();
        let h = forward_layers(&mut tape, h, &[pos], &bound, 0..cfg.n_layers, &mut opts, None, Some(cache))?;
        let logits = lm_logits(&mut tape, h, &bound, None)?;
        stats.decode_steps += 1;
        token = argmax(tape.value(logits).row(0));
        pos += 1;
    }
    Ok(out)
}
