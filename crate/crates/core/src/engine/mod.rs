//! The unified pipeline: prefill through the early layers, score and prune
//! pages at the retrieval layer, finish the deep layers on the retained
//! rows, then decode. Also the joint loss and both training stages.

mod bundle;
mod prune;
mod train;

pub use bundle::ModelBundle;
pub use prune::{prune_hidden, prune_on_tape, surviving_layout, PruneRecord};
pub use train::{
    stage1_doc_loss, stage2_doc_loss, train_stage1, train_stage2, LossRow, StageConfig,
    Stage2Params,
};

use serde::{Deserialize, Serialize};

use crate::corpus::{SyntheticDocument, Vocab};
use crate::error::{Error, Result};
use crate::model::{
    embed, forward_layers, greedy_decode, lm_logits, BoundModel, ForwardOptions, ForwardStats,
    ForwardTrace, KvCache, LoraSet, ModelConfig, TransformerWeights,
};
use crate::numerics::{mac_count, Rng, Tape, Var};
use crate::retrieval::{
    project, project_on_tape, retrieval_loss_on_tape, score_pages, score_pages_on_tape,
    select_topk, BoundModule, RetrievalModule, RetrievalResult,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningMode {
    Urag,
    Baseline,
}

/// Which rows early layers keep in their KV cache once pages are pruned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeKvPolicy {
    PruneAllLayers,
    FullEarlyLayers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub loss_weight_retrieval: f64,
    pub loss_weight_generation: f64,
    pub pruning_mode: PruningMode,
    pub decode_kv_policy: DecodeKvPolicy,
    /// Run stage 2 on a freshly initialised retrieval module (ablation).
    pub skip_stage1: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            model: ModelConfig::default(),
            stage1: StageConfig::stage1_default(),
            stage2: StageConfig::stage2_default(),
            loss_weight_retrieval: 1.0,
            loss_weight_generation: 1.0,
            pruning_mode: PruningMode::Urag,
            decode_kv_policy: DecodeKvPolicy::PruneAllLayers,
            skip_stage1: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::Config { field: format!("engine.{field}"), reason },
            other => other,
        })?;
        self.stage1.validate("engine.stage1")?;
        self.stage2.validate("engine.stage2")?;
        for (name, w) in [
            ("loss_weight_retrieval", self.loss_weight_retrieval),
            ("loss_weight_generation", self.loss_weight_generation),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::config(format!("engine.{name}"), "must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Result of answering one question.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Generated answer tokens, end marker excluded.
    pub answer: Vec<usize>,
    /// Logits at the last prefilled row.
    pub first_logits: Vec<f64>,
    pub trace: ForwardTrace,
    /// Page scores used for retrieval metrics. In baseline mode they come
    /// from a diagnostic pass over the layer-r hidden states that does not
    /// influence generation.
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InferOptions {
    pub retain_hidden: bool,
    pub retain_attention: bool,
    /// Skip decoding and return after the prefill.
    pub prefill_only: bool,
    /// Leave `scores` empty in baseline mode instead of running the
    /// diagnostic retrieval pass.
    pub skip_scores: bool,
}

/// Answers `doc` with a single model instance and a single prefill pass.
/// Evidence labels are never read.
pub fn infer(
    doc: &SyntheticDocument,
    weights: &TransformerWeights,
    module: &RetrievalModule,
    cfg: &EngineConfig,
    opts: InferOptions,
) -> Result<Inference> {
    let mc = &cfg.model;
    let r = mc.retrieval_layer;
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, mc, weights, None, false);
    let mut stats = ForwardStats { model_instances: 1, ..ForwardStats::default() };
    let start_macs = mac_count();

    let (h0, layout) = embed(&mut tape, &bound, doc, mc, false)?;
    let mut trace = ForwardTrace::new(mc.n_layers, layout.clone());
    let mut fopts = ForwardOptions {
        retain_hidden: opts.retain_hidden,
        retain_attention: opts.retain_attention,
        dropout_rng: None,
    };
    let mut cache = KvCache::new(mc.n_layers, mc.hidden_dim);
    stats.prefill_passes += 1;
    let hr = forward_layers(&mut tape, h0, &layout.positions, &bound, 0..r, &mut fopts, Some(&mut trace), Some(&mut cache))?;

    let (h_final, deep_layout, scores) = match cfg.pruning_mode {
        PruningMode::Urag => {
            let projected = project(tape.value(hr), module)?;
            let scores = score_pages(&projected, &layout)?;
            stats.retrieval_calls += 1;
            let result = select_topk(&scores, mc.top_k, None)?;
            let (hp, record) = prune_on_tape(&mut tape, hr, &layout, &result, mc.reindex_positions)?;
            if cfg.decode_kv_policy == DecodeKvPolicy::PruneAllLayers {
                cache.retain_rows(0..r, &record.surviving_indices)?;
            }
            let deep = record.surviving.clone();
            trace.pruned_layout = Some(deep.clone());
            trace.pruned_from = r;
            trace.retrieval = Some(result);
            let hf = forward_layers(&mut tape, hp, &deep.positions, &bound, r..mc.n_layers, &mut fopts, Some(&mut trace), Some(&mut cache))?;
            (hf, deep, Some(scores))
        }
        PruningMode::Baseline => {
            let hf = forward_layers(&mut tape, hr, &layout.positions, &bound, r..mc.n_layers, &mut fopts, Some(&mut trace), Some(&mut cache))?;
            (hf, layout.clone(), None)
        }
    };
    let last = deep_layout.query.end - 1;
    let logits = lm_logits(&mut tape, h_final, &bound, Some(vec![last]))?;
    let first_logits = tape.value(logits).row(0).to_vec();
    stats.prefill_macs = mac_count() - start_macs;

    let scores = match scores {
        Some(s) => s,
        None if opts.skip_scores => Vec::new(),
        None => score_pages(&project(tape.value(hr), module)?, &layout)?,
    };

    let answer = if opts.prefill_only {
        Vec::new()
    } else {
        let next = deep_layout.positions[last] + 1;
        greedy_decode(weights, mc, None, &mut cache, &first_logits, next, Vocab::EOS, &mut stats)?
    };
    trace.stats = stats;
    Ok(Inference { answer, first_logits, trace, scores })
}

/// Loss terms of one training document, as tape nodes.
pub struct JointLoss {
    pub total: Var,
    pub retrieval: Var,
    pub generation: Var,
    pub record: PruneRecord,
}

/// Teacher-forced loss on one document: retrieval loss on the unforced
/// layer-r scores plus mean answer cross-entropy on the pruned sequence with
/// evidence pages forced in.
pub fn joint_loss_on_tape(
    tape: &mut Tape,
    doc: &SyntheticDocument,
    bound: &BoundModel,
    module: &BoundModule,
    cfg: &EngineConfig,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<JointLoss> {
    if doc.answer.is_empty() {
        return Err(Error::Invalid(format!("document {} has an empty answer", doc.doc_id)));
    }
    let mc = &cfg.model;
    let r = mc.retrieval_layer;
    let (h0, layout) = embed(tape, bound, doc, mc, true)?;
    let mut fopts = ForwardOptions { dropout_rng: dropout_rng.as_deref_mut(), ..Default::default() };
    let hr = forward_layers(tape, h0, &layout.positions, bound, 0..r, &mut fopts, None, None)?;
    let projected = project_on_tape(tape, hr, module, dropout_rng.as_deref_mut())?;
    let scores = score_pages_on_tape(tape, projected, &layout)?;
    let l_ret = retrieval_loss_on_tape(tape, scores, &doc.evidence_pages)?;
    let score_values = tape.value(scores).row(0).to_vec();
    let result = select_topk(&score_values, mc.top_k, Some(&doc.evidence_pages))?;
    let (hp, record) = prune_on_tape(tape, hr, &layout, &result, mc.reindex_positions)?;
    let deep = &record.surviving;
    let mut fopts = ForwardOptions { dropout_rng: dropout_rng.as_deref_mut(), ..Default::default() };
    let hf = forward_layers(tape, hp, &deep.positions, bound, r..mc.n_layers, &mut fopts, None, None)?;
    let rows: Vec<usize> = std::iter::once(deep.query.end - 1).chain(deep.answer.clone()).collect();
    let mut targets = doc.answer.clone();
    targets.push(Vocab::EOS);
    let logits = lm_logits(tape, hf, bound, Some(rows))?;
    let l_gen = tape.cross_entropy(logits, targets)?;
    let a = tape.scale(l_ret, cfg.loss_weight_retrieval);
    let b = tape.scale(l_gen, cfg.loss_weight_generation);
    let total = tape.add(a, b)?;
    Ok(JointLoss { total, retrieval: l_ret, generation: l_gen, record })
}

/// Value of the joint loss for fixed weights, without dropout.
pub fn joint_loss(
    doc: &SyntheticDocument,
    weights: &TransformerWeights,
    lora: Option<&LoraSet>,
    module: &RetrievalModule,
    module_lora: Option<&crate::retrieval::ModuleLora>,
    cfg: &EngineConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, &cfg.model, weights, lora, false);
    let bm = BoundModule::bind(&mut tape, module, module_lora, false, false);
    let loss = joint_loss_on_tape(&mut tape, doc, &bound, &bm, cfg, None)?;
    Ok(tape.value(loss.total).item())
}

/// Page scores at the retrieval layer for fixed weights, without decoding.
pub fn retrieval_scores(
    doc: &SyntheticDocument,
    weights: &TransformerWeights,
    module: &RetrievalModule,
    cfg: &EngineConfig,
) -> Result<RetrievalResult> {
    let inf = infer(doc, weights, module, cfg, InferOptions { prefill_only: true, ..Default::default() })?;
    select_topk(&inf.scores, cfg.model.top_k, None)
}
