//! Layer-wise probes: how concentrated the attention of generating rows is
//! over pages, whether that attention or the raw hidden states already
//! single out the evidence pages, and a token-level similarity export.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticDocument;
use crate::engine::{infer, EngineConfig, InferOptions, PruningMode};
use crate::error::{Error, Result};
use crate::evalflops::{topk_hit, HitRule};
use crate::model::{embed, forward_layers, BoundModel, ForwardOptions, ForwardTrace, TransformerWeights};
use crate::numerics::{pairwise_dots, row_l2_normalize, Rng, Tape};
use crate::retrieval::{project, rank_pages, score_pages, RetrievalModule};

/// Attention mass per page at one layer, averaged over generating rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PageWeights {
    pub page_ids: Vec<usize>,
    pub weights: Vec<f64>,
    /// Set when the layer ran on a pruned sequence, so only surviving pages
    /// are reported.
    pub pruned: bool,
}

/// Sums attention over heads and over each page's rows, for every row in
/// `rows`, and averages the per-row vectors.
pub fn page_attention_weights(trace: &ForwardTrace, layer: usize, rows: &[usize]) -> Result<PageWeights> {
    let heads = trace
        .attention
        .get(layer)
        .and_then(|a| a.as_ref())
        .ok_or_else(|| Error::Invalid(format!("trace holds no attention for layer {layer}")))?;
    if rows.is_empty() {
        return Err(Error::Invalid("no generating rows".into()));
    }
    let layout = trace.layout_at(layer);
    let mut weights = vec![0.0; layout.n_pages()];
    for h in heads {
        // Queries are the trailing rows of the key sequence.
        let offset = h.cols() - h.rows();
        for &g in rows {
            if g < offset || g - offset >= h.rows() {
                return Err(Error::Invalid(format!("row {g} has no attention entry at layer {layer}")));
            }
            let a = h.row(g - offset);
            for (w, p) in weights.iter_mut().zip(&layout.pages) {
                *w += a[p.span.clone()].iter().sum::<f64>();
            }
        }
    }
    let n = rows.len() as f64;
    weights.iter_mut().for_each(|w| *w /= n);
    Ok(PageWeights {
        page_ids: layout.page_ids(),
        weights,
        pruned: trace.pruned_layout.is_some() && layer >= trace.pruned_from,
    })
}

/// Natural-log entropy of `w` after normalising it to a distribution.
pub fn attention_entropy(w: &[f64]) -> Result<f64> {
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Invalid("page weights must be finite and nonnegative".into()));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::Invalid("page weights are all zero".into()));
    }
    Ok(w
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let p = x / total;
            -p * p.ln()
        })
        .sum())
}

/// Per-layer findings for one question.
#[derive(Clone, Debug, PartialEq)]
pub struct DocProbe {
    pub doc_id: u64,
    pub evidence_pages: Vec<usize>,
    /// Entropy of the page attention at each layer.
    pub entropy: Vec<f64>,
    /// Pages ranked by attention mass at each layer, best first.
    pub attention_ranking: Vec<Vec<usize>>,
    /// Pages ranked by late interaction of normalised hidden states entering
    /// each layer, best first.
    pub embedding_ranking: Vec<Vec<usize>>,
}

/// Decodes an answer without pruning, then replays the prompt plus that
/// answer with attention retained. Generating rows are the last query row
/// and every generated row that produced another token or the end marker.
pub fn probe_document(doc: &SyntheticDocument, weights: &TransformerWeights, cfg: &EngineConfig) -> Result<DocProbe> {
    let mc = &cfg.model;
    let full = EngineConfig { pruning_mode: PruningMode::Baseline, ..cfg.clone() };
    // Baseline decoding with skipped scores never reads the module, so any
    // correctly shaped one will do.
    let opts = InferOptions { skip_scores: true, ..InferOptions::default() };
    let decoded = infer(doc, weights, &RetrievalModule::random(mc, &mut Rng::new(0)), &full, opts)?;
    let mut replay = doc.clone();
    replay.answer = decoded.answer.clone();

    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, mc, weights, None, false);
    let (h0, layout) = embed(&mut tape, &bound, &replay, mc, true)?;
    let mut trace = ForwardTrace::new(mc.n_layers, layout.clone());
    let mut opts = ForwardOptions { retain_hidden: true, retain_attention: true, dropout_rng: None };
    forward_layers(&mut tape, h0, &layout.positions, &bound, 0..mc.n_layers, &mut opts, Some(&mut trace), None)?;

    let mut rows = vec![layout.query.end - 1];
    let mut generated: Vec<usize> = layout.answer.clone().collect();
    if decoded.answer.len() == mc.max_decode_steps {
        generated.pop();
    }
    rows.extend(generated);

    let mut entropy = Vec::with_capacity(mc.n_layers);
    let mut attention_ranking = Vec::with_capacity(mc.n_layers);
    let mut embedding_ranking = Vec::with_capacity(mc.n_layers);
    let prompt = layout.without_answer();
    for l in 0..mc.n_layers {
        let w = page_attention_weights(&trace, l, &rows)?;
        entropy.push(attention_entropy(&w.weights)?);
        attention_ranking.push(rank_pages(&w.weights));
        let hidden = trace.hidden[l]
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("trace holds no hidden states for layer {l}")))?;
        let normed = row_l2_normalize(&hidden.slice_rows(0, prompt.len()));
        embedding_ranking.push(rank_pages(&score_pages(&normed, &prompt)?));
    }
    Ok(DocProbe {
        doc_id: doc.doc_id,
        evidence_pages: doc.evidence_pages.clone(),
        entropy,
        attention_ranking,
        embedding_ranking,
    })
}

/// One line of the probe CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProbeRow {
    pub layer: usize,
    pub entropy_mean: f64,
    pub attn_top1: f64,
    pub attn_top5: f64,
    pub emb_top1: f64,
    pub emb_top5: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProbeReport {
    pub rows: Vec<LayerProbeRow>,
    /// question × layer entropies, for bound checks.
    pub entropies: Vec<Vec<f64>>,
    pub n_questions: usize,
}

fn accuracy(probes: &[DocProbe], layer: usize, m: usize, ranking: impl Fn(&DocProbe) -> &Vec<Vec<usize>>) -> Result<f64> {
    let mut hits = 0usize;
    for p in probes {
        let r = ranking(p)
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("probe has no layer {layer}")))?;
        hits += usize::from(topk_hit(r, &p.evidence_pages, m, HitRule::AnyHit)?);
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Top-m accuracy when pages are ranked by attention mass at `layer`.
pub fn attention_retrieval_accuracy(probes: &[DocProbe], layer: usize, m: usize) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Invalid("no probes".into()));
    }
    accuracy(probes, layer, m, |p| &p.attention_ranking)
}

/// Top-m accuracy when pages are ranked with raw hidden states at `layer`.
pub fn embedding_retrieval_accuracy(probes: &[DocProbe], layer: usize, m: usize) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Invalid("no probes".into()));
    }
    accuracy(probes, layer, m, |p| &p.embedding_ranking)
}

/// Probes every question (in parallel, merged in corpus order) and
/// aggregates per layer.
pub fn probe_layers(docs: &[SyntheticDocument], weights: &TransformerWeights, cfg: &EngineConfig) -> Result<LayerProbeReport> {
    if docs.is_empty() {
        return Err(Error::Invalid("no questions to probe".into()));
    }
    let probes: Vec<DocProbe> = docs
        .par_iter()
        .map(|d| probe_document(d, weights, cfg))
        .collect::<Result<_>>()?;
    let n = probes.len() as f64;
    let mut rows = Vec::with_capacity(cfg.model.n_layers);
    for l in 0..cfg.model.n_layers {
        rows.push(LayerProbeRow {
            layer: l,
            entropy_mean: probes.iter().map(|p| p.entropy[l]).sum::<f64>() / n,
            attn_top1: attention_retrieval_accuracy(&probes, l, 1)?,
            attn_top5: attention_retrieval_accuracy(&probes, l, 5)?,
            emb_top1: embedding_retrieval_accuracy(&probes, l, 1)?,
            emb_top5: embedding_retrieval_accuracy(&probes, l, 5)?,
        });
    }
    Ok(LayerProbeReport {
        rows,
        entropies: probes.iter().map(|p| p.entropy.clone()).collect(),
        n_questions: probes.len(),
    })
}

/// One line of the similarity-map CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub page_id: usize,
    pub token_index: usize,
    pub similarity: f64,
}

/// For each page token, the best dot product with any projected query token
/// at the retrieval layer.
pub fn export_similarity_map(
    doc: &SyntheticDocument,
    weights: &TransformerWeights,
    module: &RetrievalModule,
    cfg: &EngineConfig,
) -> Result<Vec<SimilarityRow>> {
    let mc = &cfg.model;
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, mc, weights, None, false);
    let (h0, layout) = embed(&mut tape, &bound, doc, mc, false)?;
    let mut opts = ForwardOptions::default();
    let hr = forward_layers(&mut tape, h0, &layout.positions, &bound, 0..mc.retrieval_layer, &mut opts, None, None)?;
    let projected = project(tape.value(hr), module)?;
    let eq = projected.slice_rows(layout.query.start, layout.query.end);
    let mut out = Vec::new();
    for p in &layout.pages {
        let ev = projected.slice_rows(p.span.start, p.span.end);
        let sims = pairwise_dots(&eq, &ev)?;
        for j in 0..ev.rows() {
            let best = (0..eq.rows()).map(|i| sims.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            out.push(SimilarityRow { page_id: p.page_id, token_index: j, similarity: best });
        }
    }
    Ok(out)
}
