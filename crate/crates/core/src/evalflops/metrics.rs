//! Answer and retrieval metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1 when the sequences are identical, else 0.
pub fn exact_match(pred: &[usize], gold: &[usize]) -> u8 {
    u8::from(pred == gold)
}

/// Normalised Levenshtein similarity over characters, floored to 0 below
/// 0.5. Two empty strings score 1.
pub fn anls(pred: &str, gold: &str) -> f64 {
    let longest = pred.chars().count().max(gold.chars().count());
    if longest == 0 {
        return 1.0;
    }
    let s = 1.0 - strsim::levenshtein(pred, gold) as f64 / longest as f64;
    if s >= 0.5 {
        s
    } else {
        0.0
    }
}

/// How a question with several evidence pages counts as a hit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitRule {
    /// At least one evidence page ranks within the top m.
    #[default]
    AnyHit,
    /// Every evidence page ranks within the top m.
    AllHit,
}

/// Whether `ranking` (best first) places evidence within its first `m`.
pub fn topk_hit(ranking: &[usize], evidence: &[usize], m: usize, rule: HitRule) -> Result<bool> {
    if m == 0 {
        return Err(Error::Invalid("top-m accuracy needs m >= 1".into()));
    }
    if evidence.is_empty() {
        return Err(Error::Invalid("question without evidence pages".into()));
    }
    let top = &ranking[..m.min(ranking.len())];
    Ok(match rule {
        HitRule::AnyHit => evidence.iter().any(|e| top.contains(e)),
        HitRule::AllHit => evidence.iter().all(|e| top.contains(e)),
    })
}

/// Mean of [`topk_hit`] over questions; `questions` pairs each ranking with
/// its evidence pages.
pub fn topk_accuracy(questions: &[(Vec<usize>, Vec<usize>)], m: usize, rule: HitRule) -> Result<f64> {
    if questions.is_empty() {
        return Err(Error::Invalid("no questions to score".into()));
    }
    let mut hits = 0usize;
    for (ranking, evidence) in questions {
        hits += usize::from(topk_hit(ranking, evidence, m, rule)?);
    }
    Ok(hits as f64 / questions.len() as f64)
}

/// One line of the evaluation CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub doc_id: u64,
    pub pred: String,
    pub gold: String,
    pub em: u8,
    pub anls: f64,
    pub top1: u8,
    pub top5: u8,
}

/// Corpus-level averages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub top5: f64,
    pub em: f64,
    pub anls: f64,
    pub n_questions: usize,
}

impl MetricsReport {
    pub fn from_rows(rows: &[EvalRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("no evaluation rows".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            top1: mean(&|r| f64::from(r.top1)),
            top5: mean(&|r| f64::from(r.top5)),
            em: mean(&|r| f64::from(r.em)),
            anls: mean(&|r| r.anls),
            n_questions: rows.len(),
        })
    }
}
