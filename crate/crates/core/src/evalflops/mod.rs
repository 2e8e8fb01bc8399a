//! Evaluation metrics, the corpus evaluation loop and the analytical cost
//! model.

mod flops;
mod metrics;

pub use flops::{flops_estimate, flops_sweep, reduction, FlopsModel, FlopsRow, CONVENTION};
pub use metrics::{anls, exact_match, topk_accuracy, topk_hit, EvalRow, HitRule, MetricsReport};

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{SyntheticDocument, Vocab};
use crate::engine::{infer, EngineConfig, InferOptions};
use crate::error::Result;
use crate::model::TransformerWeights;
use crate::retrieval::{rank_pages, RetrievalModule};

/// Answers every question and scores it. Questions run in parallel on the
/// current thread pool; rows come back in corpus order.
pub fn evaluate(
    docs: &[SyntheticDocument],
    weights: &TransformerWeights,
    module: &RetrievalModule,
    cfg: &EngineConfig,
    vocab: &Vocab,
) -> Result<Vec<EvalRow>> {
    docs.par_iter()
        .map(|doc| {
            let inf = infer(doc, weights, module, cfg, InferOptions::default())?;
            let ranking = rank_pages(&inf.scores);
            let pred = vocab.detokenize(&inf.answer);
            let gold = vocab.detokenize(&doc.answer);
            Ok(EvalRow {
                doc_id: doc.doc_id,
                em: exact_match(&inf.answer, &doc.answer),
                anls: anls(&pred, &gold),
                top1: u8::from(topk_hit(&ranking, &doc.evidence_pages, 1, HitRule::AnyHit)?),
                top5: u8::from(topk_hit(&ranking, &doc.evidence_pages, 5, HitRule::AnyHit)?),
                pred,
                gold,
            })
        })
        .collect()
}

/// Writes serialisable rows as a headed CSV file.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
