//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so the node index is a topological
//! order and the backward sweep simply walks the tape from the end.

use crate::error::{Error, Result};

use super::matrix::{
    argmax, gelu_grad_scalar, gelu_scalar, matmul_at_unchecked, matmul_bt_unchecked,
    matmul_unchecked, pairwise_dots, sigmoid, softmax_in_place, softplus, Matrix, NORM_EPS,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rotary phase assignment for a sequence: one absolute position per row.
#[derive(Clone, Debug)]
pub struct RopeSpec {
    pub positions: Vec<usize>,
    pub n_heads: usize,
    pub head_dim: usize,
    pub base: f64,
}

impl RopeSpec {
    fn inv_freq(&self) -> Vec<f64> {
        let half = self.head_dim / 2;
        (0..half)
            .map(|f| self.base.powf(-2.0 * f as f64 / self.head_dim as f64))
            .collect()
    }

    /// Rotates each head's (f, f + head_dim/2) pairs by `sign · pos · θ_f`.
    fn apply(&self, x: &Matrix, sign: f64) -> Matrix {
        let mut out = x.clone();
        let half = self.head_dim / 2;
        let inv_freq = self.inv_freq();
        for (i, &pos) in self.positions.iter().enumerate() {
            let row = out.row_mut(i);
            for (f, &theta) in inv_freq.iter().enumerate() {
                let angle = pos as f64 * theta;
                let (s, c) = (sign * angle).sin_cos();
                for h in 0..self.n_heads {
                    let a = h * self.head_dim + f;
                    let b = a + half;
                    let (xa, xb) = (row[a], row[b]);
                    row[a] = xa * c - xb * s;
                    row[b] = xa * s + xb * c;
                }
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    Silu(Var),
    Softplus(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Rope { x: Var, spec: RopeSpec },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, probs: Vec<Matrix> },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    LateInteraction { q: Var, v: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications for a later backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Columns `[start, start + width)` of `m`.
fn col_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[start..start + width]);
    }
    out
}

fn add_col_block(dst: &mut Matrix, src: &Matrix, start: usize) {
    for i in 0..src.rows() {
        let width = src.cols();
        let d = &mut dst.row_mut(i)[start..start + width];
        for (a, b) in d.iter_mut().zip(src.row(i)) {
            *a += *b;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Matrix, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Per-head attention probabilities recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Matrix]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} times {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_unchecked(va, vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} times ({:?})ᵀ", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_bt_unchecked(va, vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= *y;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= *y;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Adds a 1×C row to every row of an R×C matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} plus row {:?}", va.shape(), vr.shape()),
            ));
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(vr.data()) {
                *o += *b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    /// `x / rms(x) ⊙ gain` per row, with `rms = sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        if vg.rows() != 1 || vg.cols() != vx.cols() {
            return Err(Error::shape(
                "rms_norm",
                format!("input {:?}, gain {:?}", vx.shape(), vg.shape()),
            ));
        }
        let d = vx.cols() as f64;
        let mut out = vx.clone();
        let mut inv_rms = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let ms = vx.row(i).iter().map(|v| v * v).sum::<f64>() / d;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for (o, g) in out.row_mut(i).iter_mut().zip(vg.data()) {
                *o *= r * g;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// Unit-norm rows; rows with norm ≤ 1e-12 become zero and pass no gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let n = vx.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let row = out.row_mut(i);
            if n > NORM_EPS {
                for v in row.iter_mut() {
                    *v /= n;
                }
            } else {
                row.fill(0.0);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    pub fn rope(&mut self, x: Var, spec: RopeSpec) -> Result<Var> {
        let vx = self.value(x);
        if spec.positions.len() != vx.rows()
            || spec.n_heads * spec.head_dim != vx.cols()
            || spec.head_dim % 2 != 0
        {
            return Err(Error::shape(
                "rope",
                format!(
                    "input {:?} with {} positions, {} heads of width {}",
                    vx.shape(),
                    spec.positions.len(),
                    spec.n_heads,
                    spec.head_dim
                ),
            ));
        }
        let out = spec.apply(vx, 1.0);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Rope { x, spec }, ng))
    }

    /// Causal multi-head attention. Queries are the last `q.rows()` positions
    /// of the key sequence, so query `i` sees keys `0..=(Tk - Tq + i)`.
    /// Scores are formed densely and masked afterwards.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = vq.shape();
        let tk = vk.rows();
        if vk.cols() != d || vv.shape() != vk.shape() || tq > tk || n_heads == 0 || d % n_heads != 0
        {
            return Err(Error::shape(
                "causal_attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, {n_heads} heads",
                    vq.shape(),
                    vk.shape(),
                    vv.shape()
                ),
            ));
        }
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let offset = tk - tq;
        let mut out = Matrix::zeros(tq, d);
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = col_block(vq, h * hd, hd);
            let kh = col_block(vk, h * hd, hd);
            let vh = col_block(vv, h * hd, hd);
            let mut p = matmul_bt_unchecked(&qh, &kh);
            for i in 0..tq {
                let row = p.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    if j > offset + i {
                        *s = f64::NEG_INFINITY;
                    } else {
                        *s *= scale;
                    }
                }
                softmax_in_place(row);
            }
            let oh = matmul_unchecked(&p, &vh);
            add_col_block(&mut out, &oh, h * hd);
            probs.push(p);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, n_heads, probs }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.rows()) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {}", vx.rows())));
        }
        let out = vx.gather_rows(&idx);
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows(x, idx), ng))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_rows(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts), ng))
    }

    pub fn gather_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&j| j >= vx.cols()) {
            return Err(Error::shape("gather_cols", format!("column {bad} of {}", vx.cols())));
        }
        let mut out = Matrix::zeros(vx.rows(), idx.len());
        for i in 0..vx.rows() {
            for (o, &j) in idx.iter().enumerate() {
                out.set(i, o, vx.get(i, j));
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherCols(x, idx), ng))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in &parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::shape("concat_cols", format!("{} rows vs {rows}", m.rows())));
            }
            cols += m.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut start = 0;
        for &p in &parts {
            let m = self.value(p);
            add_col_block(&mut out, m, start);
            start += m.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts), ng))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// `Σ_i max_j q_i · v_j` as a 1×1 node. The max routes its gradient to the
    /// first maximising `j`.
    pub fn late_interaction(&mut self, q: Var, v: Var) -> Result<Var> {
        let (vq, vv) = (self.value(q), self.value(v));
        if vq.rows() == 0 || vv.rows() == 0 {
            return Err(Error::Invalid("late interaction over an empty token set".into()));
        }
        if vq.cols() != vv.cols() {
            return Err(Error::shape(
                "late_interaction",
                format!("query {:?} vs page {:?}", vq.shape(), vv.shape()),
            ));
        }
        let sims = pairwise_dots(vq, vv)?;
        let mut total = 0.0;
        let mut arg = Vec::with_capacity(vq.rows());
        for i in 0..sims.rows() {
            let j = argmax(sims.row(i));
            total += sims.get(i, j);
            arg.push(j);
        }
        let ng = self.ng(q) || self.ng(v);
        Ok(self.push(Matrix::scalar(total), Op::LateInteraction { q, v, argmax: arg }, ng))
    }

    /// Mean token cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let vl = self.value(logits);
        if targets.len() != vl.rows() || targets.is_empty() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), vl.rows()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vl.cols()) {
            return Err(Error::shape("cross_entropy", format!("target {bad} of {}", vl.cols())));
        }
        let mut probs = vl.clone();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = vl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(probs.row_mut(i));
        }
        loss /= targets.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, targets, probs }, ng))
    }

    /// Backward sweep from a scalar node. Only nodes that depend on a
    /// differentiable leaf receive adjoints.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape("backward", format!("loss must be 1x1, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    accumulate(&mut grads[a.0], matmul_bt_unchecked(g, self.value(*b)));
                }
                if ng(*b) {
                    accumulate(&mut grads[b.0], matmul_at_unchecked(self.value(*a), g));
                }
            }
            Op::MatMulBt(a, b) => {
                if ng(*a) {
                    accumulate(&mut grads[a.0], matmul_unchecked(g, self.value(*b)));
                }
                if ng(*b) {
                    accumulate(&mut grads[b.0], matmul_at_unchecked(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if ng(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if ng(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if ng(*b) {
                    accumulate(&mut grads[b.0], g.scaled(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    let mut d = g.clone();
                    for (o, y) in d.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= *y;
                    }
                    accumulate(&mut grads[a.0], d);
                }
                if ng(*b) {
                    let mut d = g.clone();
                    for (o, y) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= *y;
                    }
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scaled(*s)),
            Op::AddRow(a, row) => {
                if ng(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if ng(*row) {
                    let mut d = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in d.data_mut().iter_mut().zip(g.row(i)) {
                            *o += *v;
                        }
                    }
                    accumulate(&mut grads[row.0], d);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (o, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *o *= gelu_grad_scalar(xv);
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (o, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    let s = sigmoid(xv);
                    *o *= s * (1.0 + xv * (1.0 - s));
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (o, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *o *= sigmoid(xv);
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let d = vx.cols() as f64;
                if ng(*x) {
                    let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                    for i in 0..vx.rows() {
                        let r = inv_rms[i];
                        let xr = vx.row(i);
                        let gr = g.row(i);
                        // dot = Σ_j g_j·gain_j·x_j
                        let dot: f64 = (0..xr.len()).map(|j| gr[j] * vg.data()[j] * xr[j]).sum();
                        let coef = r * r * r * dot / d;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = r * gr[j] * vg.data()[j] - coef * xr[j];
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if ng(*gain) {
                    let mut dg = Matrix::zeros(1, vx.cols());
                    for i in 0..vx.rows() {
                        let r = inv_rms[i];
                        for (j, o) in dg.data_mut().iter_mut().enumerate() {
                            *o += g.get(i, j) * vx.get(i, j) * r;
                        }
                    }
                    accumulate(&mut grads[gain.0], dg);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for (i, &n) in norms.iter().enumerate() {
                    if n <= NORM_EPS {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = (gr[j] - yr[j] * dot) / n;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Rope { x, spec } => accumulate(&mut grads[x.0], spec.apply(g, -1.0)),
            Op::Attention { q, k, v, n_heads, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = vq.cols();
                let hd = d / n_heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Matrix::zeros(vq.rows(), d);
                let mut dk = Matrix::zeros(vk.rows(), d);
                let mut dv = Matrix::zeros(vv.rows(), d);
                for (h, p) in probs.iter().enumerate() {
                    let goh = col_block(g, h * hd, hd);
                    let vh = col_block(vv, h * hd, hd);
                    if ng(*v) {
                        add_col_block(&mut dv, &matmul_at_unchecked(p, &goh), h * hd);
                    }
                    if ng(*q) || ng(*k) {
                        let dp = matmul_bt_unchecked(&goh, &vh);
                        let mut ds = Matrix::zeros(p.rows(), p.cols());
                        for i in 0..p.rows() {
                            let pr = p.row(i);
                            let dpr = dp.row(i);
                            let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                            for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
                                *o = pr[j] * (dpr[j] - dot) * scale;
                            }
                        }
                        if ng(*q) {
                            let kh = col_block(vk, h * hd, hd);
                            add_col_block(&mut dq, &matmul_unchecked(&ds, &kh), h * hd);
                        }
                        if ng(*k) {
                            let qh = col_block(vq, h * hd, hd);
                            add_col_block(&mut dk, &matmul_at_unchecked(&ds, &qh), h * hd);
                        }
                    }
                }
                if ng(*q) {
                    accumulate(&mut grads[q.0], dq);
                }
                if ng(*k) {
                    accumulate(&mut grads[k.0], dk);
                }
                if ng(*v) {
                    accumulate(&mut grads[v.0], dv);
                }
            }
            Op::GatherRows(x, idx) => {
                let vx = self.value(*x);
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for (o, &i) in idx.iter().enumerate() {
                    for (a, b) in dx.row_mut(i).iter_mut().zip(g.row(o)) {
                        *a += *b;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if ng(*p) {
                        accumulate(&mut grads[p.0], g.slice_rows(start, start + rows));
                    }
                    start += rows;
                }
            }
            Op::GatherCols(x, idx) => {
                let vx = self.value(*x);
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for i in 0..g.rows() {
                    for (o, &j) in idx.iter().enumerate() {
                        let cur = dx.get(i, j);
                        dx.set(i, j, cur + g.get(i, o));
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if ng(*p) {
                        accumulate(&mut grads[p.0], col_block(g, start, cols));
                    }
                    start += cols;
                }
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                accumulate(&mut grads[x.0], Matrix::filled(r, c, g.item()));
            }
            Op::LateInteraction { q, v, argmax } => {
                let (vq, vv) = (self.value(*q), self.value(*v));
                let gs = g.item();
                if ng(*q) {
                    let mut dq = Matrix::zeros(vq.rows(), vq.cols());
                    for (i, &j) in argmax.iter().enumerate() {
                        for (o, b) in dq.row_mut(i).iter_mut().zip(vv.row(j)) {
                            *o = gs * b;
                        }
                    }
                    accumulate(&mut grads[q.0], dq);
                }
                if ng(*v) {
                    let mut dv = Matrix::zeros(vv.rows(), vv.cols());
                    for (i, &j) in argmax.iter().enumerate() {
                        for (o, a) in dv.row_mut(j).iter_mut().zip(vq.row(i)) {
                            *o += gs * a;
                        }
                    }
                    accumulate(&mut grads[v.0], dv);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let mut d = probs.clone();
                let n = targets.len() as f64;
                for (i, &t) in targets.iter().enumerate() {
                    let cur = d.get(i, t);
                    d.set(i, t, cur - 1.0);
                }
                d.scale_in_place(g.item() / n);
                accumulate(&mut grads[logits.0], d);
            }
        }
    }
}
