//! Stage 1 trains the retrieval module alone on the frozen early layers.
//! Stage 2 trains LoRA adapters on the backbone and the module with the
//! joint loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticDocument;
use crate::error::{Error, Result};
use crate::model::{embed, forward_layers, BoundModel, ForwardOptions, LoraSet, TransformerWeights};
use crate::numerics::{adamw_step, lr_at, Matrix, OptimizerState, Rng, Tape};
use crate::retrieval::{
    project_on_tape, retrieval_loss_on_tape, score_pages_on_tape, BoundModule, ModuleLora,
    RetrievalModule,
};

use super::{joint_loss_on_tape, EngineConfig};

/// Optimiser settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Stops after this many optimiser steps; the schedule is laid out over
    /// the truncated length.
    pub max_steps: Option<usize>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::stage1_default()
    }
}

impl StageConfig {
    pub fn stage1_default() -> Self {
        StageConfig {
            base_lr: 2e-3,
            epochs: 1,
            batch_size: 4,
            grad_accum: 8,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            max_steps: None,
        }
    }

    pub fn stage2_default() -> Self {
        StageConfig { base_lr: 1e-4, ..StageConfig::stage1_default() }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config(format!("{prefix}.base_lr"), "must be positive and finite"));
        }
        if self.epochs == 0 {
            return Err(Error::config(format!("{prefix}.epochs"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{prefix}.batch_size"), "must be at least 1"));
        }
        if self.grad_accum == 0 {
            return Err(Error::config(format!("{prefix}.grad_accum"), "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config(format!("{prefix}.warmup_ratio"), "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config(format!("{prefix}.weight_decay"), "must be finite and nonnegative"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config(format!("{prefix}.max_steps"), "must be at least 1 when set"));
        }
        Ok(())
    }

    fn docs_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    /// Number of optimiser steps over `n_docs` training documents.
    pub fn total_steps(&self, n_docs: usize) -> usize {
        let per_epoch = n_docs.div_ceil(self.docs_per_step());
        let full = per_epoch * self.epochs;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// One line of the loss log. Stage 1 reports a zero generation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss_retrieval: f64,
    pub loss_generation: f64,
    pub loss_total: f64,
}

/// Trainable parameters of stage 2.
#[derive(Clone, Debug)]
pub struct Stage2Params {
    pub lora: LoraSet,
    pub module_lora: ModuleLora,
}

impl Stage2Params {
    fn shapes(&self) -> Vec<(usize, usize)> {
        let mut s = self.lora.shapes();
        s.extend(self.module_lora.shapes());
        s
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut p = self.lora.params_mut();
        p.extend(self.module_lora.params_mut());
        p
    }
}

/// Per-document loss parts and gradients, in parameter order.
type DocGrad = (LossRow, Vec<Matrix>);

/// Retrieval loss of one document and its gradient with respect to the
/// module parameters (`w1, b1, w2, b2`).
pub fn stage1_doc_loss(
    doc: &SyntheticDocument,
    weights: &TransformerWeights,
    module: &RetrievalModule,
    cfg: &EngineConfig,
) -> Result<DocGrad> {
    let mc = &cfg.model;
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, mc, weights, None, false);
    let (h0, layout) = embed(&mut tape, &bound, doc, mc, false)?;
    let mut opts = ForwardOptions::default();
    let hr = forward_layers(&mut tape, h0, &layout.positions, &bound, 0..mc.retrieval_layer, &mut opts, None, None)?;
    let bm = BoundModule::bind(&mut tape, module, None, true, false);
    let projected = project_on_tape(&mut tape, hr, &bm, None)?;
    let scores = score_pages_on_tape(&mut tape, projected, &layout)?;
    let loss = retrieval_loss_on_tape(&mut tape, scores, &doc.evidence_pages)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let g = collect_grads(&mut grads, &bm.params, &tape)?;
    let row = LossRow { step: 0, loss_retrieval: value, loss_generation: 0.0, loss_total: value };
    Ok((row, g))
}

/// Joint loss of one document and its gradient with respect to the stage-2
/// adapters, in [`Stage2Params`] order. Dropout is applied when a generator
/// is given.
pub fn stage2_doc_loss(
    doc: &SyntheticDocument,
    weights: &TransformerWeights,
    module: &RetrievalModule,
    params: &Stage2Params,
    cfg: &EngineConfig,
    dropout_rng: Option<&mut Rng>,
) -> Result<DocGrad> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, &cfg.model, weights, Some(&params.lora), true);
    let bm = BoundModule::bind(&mut tape, module, Some(&params.module_lora), false, true);
    let loss = joint_loss_on_tape(&mut tape, doc, &bound, &bm, cfg, dropout_rng)?;
    let row = LossRow {
        step: 0,
        loss_retrieval: tape.value(loss.retrieval).item(),
        loss_generation: tape.value(loss.generation).item(),
        loss_total: tape.value(loss.total).item(),
    };
    let mut grads = tape.backward(loss.total)?;
    let mut vars = bound.lora_params.clone();
    vars.extend(bm.params.iter().copied());
    let g = collect_grads(&mut grads, &vars, &tape)?;
    Ok((row, g))
}

fn collect_grads(
    grads: &mut crate::numerics::Gradients,
    vars: &[crate::numerics::Var],
    tape: &Tape,
) -> Result<Vec<Matrix>> {
    Ok(vars
        .iter()
        .map(|&v| {
            grads.take(v).unwrap_or_else(|| {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            })
        })
        .collect())
}

/// Trains the retrieval module in place and returns the loss log.
pub fn train_stage1(
    docs: &[SyntheticDocument],
    weights: &TransformerWeights,
    module: &mut RetrievalModule,
    cfg: &EngineConfig,
    seed: u64,
    progress: &mut dyn FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    let shapes = module.shapes();
    run_stage(
        module,
        docs,
        &cfg.stage1,
        seed,
        &shapes,
        |m, doc, _| stage1_doc_loss(doc, weights, m, cfg),
        |m| m.params_mut(),
        progress,
    )
}

/// Trains the stage-2 adapters in place and returns the loss log.
pub fn train_stage2(
    docs: &[SyntheticDocument],
    weights: &TransformerWeights,
    module: &RetrievalModule,
    params: &mut Stage2Params,
    cfg: &EngineConfig,
    seed: u64,
    progress: &mut dyn FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    let shapes = params.shapes();
    run_stage(
        params,
        docs,
        &cfg.stage2,
        seed,
        &shapes,
        |p, doc, doc_seed| {
            let mut rng = Rng::new(doc_seed);
            stage2_doc_loss(doc, weights, module, p, cfg, Some(&mut rng))
        },
        |p| p.params_mut(),
        progress,
    )
}

/// Shared loop: per-epoch shuffles, gradient averaging over
/// `batch_size × grad_accum` documents per step and AdamW under the
/// warmup-cosine schedule. Documents of a step are processed in parallel and
/// reduced in a fixed order, so the result does not depend on the number of
/// worker threads.
#[allow(clippy::too_many_arguments)]
fn run_stage<S: Sync>(
    state: &mut S,
    docs: &[SyntheticDocument],
    sc: &StageConfig,
    seed: u64,
    shapes: &[(usize, usize)],
    grad_fn: impl Fn(&S, &SyntheticDocument, u64) -> Result<DocGrad> + Sync,
    params_mut: impl Fn(&mut S) -> Vec<(String, &mut Matrix)>,
    progress: &mut dyn FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    if docs.is_empty() {
        return Err(Error::Invalid("no training documents".into()));
    }
    let total = sc.total_steps(docs.len());
    let mut opt = OptimizerState::new(shapes);
    opt.weight_decay = sc.weight_decay;
    let mut root = Rng::new(seed);
    let mut log = Vec::with_capacity(total);
    let per_step = sc.docs_per_step();
    let mut step = 0;
    'epochs: for epoch in 0..sc.epochs {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        root.fork(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(per_step) {
            if step == total {
                break 'epochs;
            }
            let mut seeds = root.fork(1_000_000 + step as u64);
            let jobs: Vec<(usize, u64)> = chunk.iter().map(|&i| (i, seeds.next_u64())).collect();
            let shared: &S = state;
            let results: Vec<Result<DocGrad>> =
                jobs.par_iter().map(|&(i, s)| grad_fn(shared, &docs[i], s)).collect();
            let mut sum: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
            let mut row = LossRow { step, loss_retrieval: 0.0, loss_generation: 0.0, loss_total: 0.0 };
            for res in results {
                let (parts, grads) = res?;
                row.loss_retrieval += parts.loss_retrieval;
                row.loss_generation += parts.loss_generation;
                row.loss_total += parts.loss_total;
                for (acc, g) in sum.iter_mut().zip(&grads) {
                    acc.add_assign(g);
                }
            }
            let n = chunk.len() as f64;
            row.loss_retrieval /= n;
            row.loss_generation /= n;
            row.loss_total /= n;
            if !row.loss_total.is_finite() {
                return Err(Error::Divergence { step, detail: format!("loss is {}", row.loss_total) });
            }
            for g in &mut sum {
                g.scale_in_place(1.0 / n);
            }
            let lr = lr_at(step, total, sc.base_lr, sc.warmup_ratio)?;
            let mut params = params_mut(state);
            adamw_step(&mut params, &sum, &mut opt, lr).map_err(|e| match e {
                Error::NonFiniteGradient(name) => {
                    Error::Divergence { step, detail: format!("non-finite gradient for `{name}`") }
                }
                other => other,
            })?;
            progress(&row);
            log.push(row);
            step += 1;
        }
    }
    Ok(log)
}
