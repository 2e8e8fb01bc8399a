//! Projection head, late-interaction page scoring, top-k selection and the
//! pairwise retrieval loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{adapted_linear, BoundAdapter, LoraAdapter, ModelConfig, SequenceLayout};
use crate::numerics::{
    argmax, gelu, matmul, pairwise_dots, randn, row_l2_normalize, Matrix, Rng, Tape, Var,
};

/// Two affine maps with a GELU between them, followed by row normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalModule {
    /// D × D′
    pub w1: Matrix,
    /// 1 × D′
    pub b1: Matrix,
    /// D′ × D″
    pub w2: Matrix,
    /// 1 × D″
    pub b2: Matrix,
}

pub const MODULE_NAMESPACE: &str = "retrieval_module";

impl RetrievalModule {
    pub fn random(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, d1, d2) = (cfg.hidden_dim, cfg.proj_dim_1, cfg.proj_dim_2);
        RetrievalModule {
            w1: randn(d, d1, 1.0 / (d as f64).sqrt(), rng),
            b1: Matrix::zeros(1, d1),
            w2: randn(d1, d2, 1.0 / (d1 as f64).sqrt(), rng),
            b2: Matrix::zeros(1, d2),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            (format!("{MODULE_NAMESPACE}.w1"), &mut self.w1),
            (format!("{MODULE_NAMESPACE}.b1"), &mut self.b1),
            (format!("{MODULE_NAMESPACE}.w2"), &mut self.w2),
            (format!("{MODULE_NAMESPACE}.b2"), &mut self.b2),
        ]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            (format!("{MODULE_NAMESPACE}.w1"), &self.w1),
            (format!("{MODULE_NAMESPACE}.b1"), &self.b1),
            (format!("{MODULE_NAMESPACE}.w2"), &self.w2),
            (format!("{MODULE_NAMESPACE}.b2"), &self.b2),
        ]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.named_tensors().iter().map(|(_, m)| m.shape()).collect()
    }

    pub fn from_named(cfg: &ModelConfig, tensors: &mut BTreeMap<String, Matrix>) -> Result<Self> {
        let (d, d1, d2) = (cfg.hidden_dim, cfg.proj_dim_1, cfg.proj_dim_2);
        let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
            let key = format!("{MODULE_NAMESPACE}.{name}");
            let m = tensors
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if m.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            Ok(m)
        };
        Ok(RetrievalModule {
            w1: take("w1", (d, d1))?,
            b1: take("b1", (1, d1))?,
            w2: take("w2", (d1, d2))?,
            b2: take("b2", (1, d2))?,
        })
    }
}

/// Adapters on the two projection matrices of the retrieval module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleLora {
    pub w1: LoraAdapter,
    pub w2: LoraAdapter,
}

impl ModuleLora {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        ModuleLora {
            w1: LoraAdapter::new(cfg.hidden_dim, cfg.proj_dim_1, cfg, rng),
            w2: LoraAdapter::new(cfg.proj_dim_1, cfg.proj_dim_2, cfg, rng),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            (format!("{MODULE_NAMESPACE}.lora.w1.a"), &mut self.w1.a),
            (format!("{MODULE_NAMESPACE}.lora.w1.b"), &mut self.w1.b),
            (format!("{MODULE_NAMESPACE}.lora.w2.a"), &mut self.w2.a),
            (format!("{MODULE_NAMESPACE}.lora.w2.b"), &mut self.w2.b),
        ]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            (format!("{MODULE_NAMESPACE}.lora.w1.a"), &self.w1.a),
            (format!("{MODULE_NAMESPACE}.lora.w1.b"), &self.w1.b),
            (format!("{MODULE_NAMESPACE}.lora.w2.a"), &self.w2.a),
            (format!("{MODULE_NAMESPACE}.lora.w2.b"), &self.w2.b),
        ]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.named_tensors().iter().map(|(_, m)| m.shape()).collect()
    }

    /// The module with both adapters folded into its weights.
    pub fn merge_into(&self, base: &RetrievalModule) -> Result<RetrievalModule> {
        let mut m = base.clone();
        m.w1.add_assign(&self.w1.delta()?);
        m.w2.add_assign(&self.w2.delta()?);
        Ok(m)
    }
}

/// Retrieval module weights placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModule {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub lora: Option<[BoundAdapter; 2]>,
    /// Differentiable leaves in `params_mut` order of whatever was trained:
    /// the module itself, or its adapters.
    pub params: Vec<Var>,
}

impl BoundModule {
    /// Binds the module. With `train_base` the module weights are leaves of
    /// the gradient; with `train_lora` only the adapters are.
    pub fn bind(
        tape: &mut Tape,
        module: &RetrievalModule,
        lora: Option<&ModuleLora>,
        train_base: bool,
        train_lora: bool,
    ) -> Self {
        let w1 = tape.leaf(module.w1.clone(), train_base);
        let b1 = tape.leaf(module.b1.clone(), train_base);
        let w2 = tape.leaf(module.w2.clone(), train_base);
        let b2 = tape.leaf(module.b2.clone(), train_base);
        let mut params = if train_base { vec![w1, b1, w2, b2] } else { Vec::new() };
        let lora = lora.map(|l| {
            [&l.w1, &l.w2].map(|ad| {
                let a = tape.leaf(ad.a.clone(), train_lora);
                let b = tape.leaf(ad.b.clone(), train_lora);
                if train_lora {
                    params.push(a);
                    params.push(b);
                }
                BoundAdapter { a, b, scale: ad.scale, dropout: ad.dropout }
            })
        });
        BoundModule { w1, b1, w2, b2, lora, params }
    }
}

fn adapted_affine(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    adapter: Option<&BoundAdapter>,
    dropout_rng: &mut Option<&mut Rng>,
) -> Result<Var> {
    let y = adapted_linear(tape, x, w, adapter, dropout_rng)?;
    tape.add_row(y, b)
}

/// `l2norm(GELU(h·W1 + b1)·W2 + b2)` on the tape.
pub fn project_on_tape(
    tape: &mut Tape,
    h: Var,
    module: &BoundModule,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Var> {
    let d_in = tape.value(module.w1).rows();
    if tape.value(h).cols() != d_in {
        return Err(Error::shape(
            "project",
            format!("hidden width {} vs module input {d_in}", tape.value(h).cols()),
        ));
    }
    let lora = module.lora.as_ref();
    let z1 = adapted_affine(tape, h, module.w1, module.b1, lora.map(|l| &l[0]), &mut dropout_rng)?;
    let a1 = tape.gelu(z1);
    let z2 = adapted_affine(tape, a1, module.w2, module.b2, lora.map(|l| &l[1]), &mut dropout_rng)?;
    Ok(tape.l2_normalize_rows(z2))
}

/// Off-tape projection: rows of `l2norm(GELU(h·W1 + b1)·W2 + b2)`.
pub fn project(h: &Matrix, module: &RetrievalModule) -> Result<Matrix> {
    if h.cols() != module.w1.rows() {
        return Err(Error::shape(
            "project",
            format!("hidden width {} vs module input {}", h.cols(), module.w1.rows()),
        ));
    }
    let mut z1 = matmul(h, &module.w1)?;
    for i in 0..z1.rows() {
        for (o, b) in z1.row_mut(i).iter_mut().zip(module.b1.data()) {
            *o += *b;
        }
    }
    let mut z2 = matmul(&gelu(&z1), &module.w2)?;
    for i in 0..z2.rows() {
        for (o, b) in z2.row_mut(i).iter_mut().zip(module.b2.data()) {
            *o += *b;
        }
    }
    Ok(row_l2_normalize(&z2))
}

/// `Σ_i max_j E_q[i]·E_v[j]`.
pub fn late_interaction_score(eq: &Matrix, ev: &Matrix) -> Result<f64> {
    if eq.rows() == 0 || ev.rows() == 0 {
        return Err(Error::Invalid("late interaction over an empty token set".into()));
    }
    let sims = pairwise_dots(eq, ev)?;
    Ok((0..sims.rows()).map(|i| sims.get(i, argmax(sims.row(i)))).sum())
}

fn check_layout(rows: usize, layout: &SequenceLayout) -> Result<()> {
    if layout.len() != rows {
        return Err(Error::shape("score_pages", format!("{rows} rows, layout covers {}", layout.len())));
    }
    Ok(())
}

/// Scores every page span of `layout` against the query span.
pub fn score_pages(projected: &Matrix, layout: &SequenceLayout) -> Result<Vec<f64>> {
    check_layout(projected.rows(), layout)?;
    let eq = projected.slice_rows(layout.query.start, layout.query.end);
    layout
        .pages
        .iter()
        .map(|p| late_interaction_score(&eq, &projected.slice_rows(p.span.start, p.span.end)))
        .collect()
}

/// Page scores as a 1×n tape node.
pub fn score_pages_on_tape(tape: &mut Tape, projected: Var, layout: &SequenceLayout) -> Result<Var> {
    check_layout(tape.value(projected).rows(), layout)?;
    let eq = tape.gather_rows(projected, layout.query.clone().collect())?;
    let mut scores = Vec::with_capacity(layout.n_pages());
    for p in &layout.pages {
        let ev = tape.gather_rows(projected, p.span.clone().collect())?;
        scores.push(tape.late_interaction(eq, ev)?);
    }
    tape.concat_cols(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub scores: Vec<f64>,
    /// Retained page indices, ascending.
    pub selected: Vec<usize>,
    /// Pages retained by the forcing rule, ascending.
    pub forced: Vec<usize>,
    pub k_effective: usize,
}

impl RetrievalResult {
    /// Pages by descending score, ties to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        rank_pages(&self.scores)
    }
}

/// Indices ordered by descending score, ties broken by ascending index.
pub fn rank_pages(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Keeps every forced page, then fills up to `min(k, n)` pages by score.
pub fn select_topk(scores: &[f64], k: usize, forced: Option<&[usize]>) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::Invalid("top-k selection needs k >= 1".into()));
    }
    let n = scores.len();
    let mut forced: Vec<usize> = forced.unwrap_or(&[]).to_vec();
    forced.sort_unstable();
    forced.dedup();
    if let Some(&bad) = forced.iter().find(|&&p| p >= n) {
        return Err(Error::Invalid(format!("forced page {bad} out of range for {n} pages")));
    }
    let budget = k.min(n);
    let mut selected = forced.clone();
    for p in rank_pages(scores) {
        if selected.len() >= budget {
            break;
        }
        if !forced.contains(&p) {
            selected.push(p);
        }
    }
    selected.sort_unstable();
    let k_effective = selected.len();
    Ok(RetrievalResult { scores: scores.to_vec(), selected, forced, k_effective })
}

/// Splits pages into sorted positives and the negatives that enter the loss:
/// all negatives when there are fewer negatives than positives, otherwise
/// the highest-scoring `P` of them.
fn loss_partition(scores: &[f64], positives: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if positives.is_empty() {
        return Err(Error::Invalid("retrieval loss needs at least one positive page".into()));
    }
    let mut pos = positives.to_vec();
    pos.sort_unstable();
    pos.dedup();
    if let Some(&bad) = pos.iter().find(|&&p| p >= scores.len()) {
        return Err(Error::Invalid(format!("positive page {bad} out of range")));
    }
    let negatives: Vec<usize> = rank_pages(scores).into_iter().filter(|p| !pos.contains(p)).collect();
    if negatives.is_empty() {
        return Err(Error::Invalid("retrieval loss is undefined without negative pages".into()));
    }
    let take = if negatives.len() < pos.len() { negatives.len() } else { pos.len() };
    Ok((pos, negatives[..take].to_vec()))
}

/// `softplus(S_neg − S_pos)` over explicit scores.
pub fn retrieval_loss(scores: &[f64], positives: &[usize]) -> Result<f64> {
    let (pos, neg) = loss_partition(scores, positives)?;
    let s_pos: f64 = pos.iter().map(|&p| scores[p]).sum();
    let s_neg: f64 = neg.iter().map(|&p| scores[p]).sum();
    Ok(crate::numerics::softplus(s_neg - s_pos))
}

/// [`retrieval_loss`] on a 1×n score node.
pub fn retrieval_loss_on_tape(tape: &mut Tape, scores: Var, positives: &[usize]) -> Result<Var> {
    let values = tape.value(scores).row(0).to_vec();
    let (pos, neg) = loss_partition(&values, positives)?;
    let s_pos = tape.gather_cols(scores, pos)?;
    let s_pos = tape.sum(s_pos);
    let s_neg = tape.gather_cols(scores, neg)?;
    let s_neg = tape.sum(s_neg);
    let margin = tape.sub(s_neg, s_pos)?;
    Ok(tape.softplus(margin))
}
