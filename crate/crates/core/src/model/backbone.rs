//! A hand-wired backbone that stands in for a pretrained model on the
//! synthetic corpus.
//!
//! The residual stream is split into named subspaces. Embeddings write a
//! constant, a modality flag and a concept code. Layer 0 copies each token's
//! key code forward by one position (`prev_key`) and into a lookup slot
//! (`lookup`): at ordinary tokens the slot holds the token's own key, at
//! answer tokens it holds the key six positions back, which is the second
//! key of the query. The reader layer `n_layers - 2` matches `lookup`
//! against `prev_key`, so a question row attends to the value that follows
//! the asked key and copies its code into `out`. With nothing to look up,
//! attention falls on the query's opening token, which writes the end
//! marker. The output head reads `out`. Every other layer is a small random
//! perturbation confined to spare dimensions.

use crate::corpus::{TextToken, Vocab, VisToken};
use crate::error::{Error, Result};
use crate::numerics::{randn, Matrix, Rng};

use super::config::ModelConfig;
use super::weights::{BlockWeights, TransformerWeights};

const TOPIC_DIMS: usize = 12;
const KEY_DIMS: usize = 14;
const VALUE_DIMS: usize = 16;
const FILLER_DIMS: usize = 12;
const MIN_FREE_DIMS: usize = 4;
/// Rotary pairs carrying positional patterns in layer 0.
const POSITIONAL_PAIRS: usize = 8;
/// Nonnegative pair weights maximising the worst-case margin between the
/// target offset and every other offset up to 512, for rotary base 1e6 and
/// head width 32.
const POSITIONAL_WEIGHTS: [f64; POSITIONAL_PAIRS] =
    [0.5253, 0.1354, 0.0736, 0.0772, 0.0807, 0.0686, 0.0392, 0.0];
/// Smallest positional margin accepted for the configured rotary base.
const MIN_POSITIONAL_MARGIN: f64 = 0.1;

/// Target attention logits, in nats.
const POSITIONAL_LOGIT_MARGIN: f64 = 16.0;
const MATCH_LOGIT: f64 = 20.0;
const SINK_LOGIT: f64 = 12.0;
const VALUE_BONUS_LOGIT: f64 = 4.0;
/// Norm of the code the reader writes into `out`.
const READ_NORM: f64 = 2.0;
const HEAD_GAIN: f64 = 3.0;
/// Scale of the random perturbations.
const NOISE_STD: f64 = 1e-3;
const BROAD_QK_STD: f64 = 0.02;
const SPARE_WRITE_STD: f64 = 0.01;

/// Residual subspace layout.
#[derive(Clone, Debug)]
struct Dims {
    konst: usize,
    vis: usize,
    txt: usize,
    answer: usize,
    sink: usize,
    value_flag: usize,
    eos_in: usize,
    sep: usize,
    none: usize,
    topic: usize,
    key: usize,
    value: usize,
    prev_key: usize,
    lookup: usize,
    out: usize,
    eos_out: usize,
    filler: usize,
    free: usize,
}

impl Dims {
    fn new() -> Self {
        let mut next = 0;
        let mut take = |n: usize| {
            let s = next;
            next += n;
            s
        };
        Dims {
            konst: take(1),
            vis: take(1),
            txt: take(1),
            answer: take(1),
            sink: take(1),
            value_flag: take(1),
            eos_in: take(1),
            sep: take(1),
            none: take(1),
            topic: take(TOPIC_DIMS),
            key: take(KEY_DIMS),
            value: take(VALUE_DIMS),
            prev_key: take(KEY_DIMS),
            lookup: take(KEY_DIMS),
            out: take(VALUE_DIMS),
            eos_out: take(1),
            filler: take(FILLER_DIMS),
            free: take(0),
        }
    }
}

/// Unit vectors with low mutual coherence, from random starts pushed apart
/// by a few hundred repulsion steps.
fn spherical_code(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let normalize = |v: &mut Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
    };
    let mut codes: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            normalize(&mut v);
            v
        })
        .collect();
    let step = 0.05;
    for _ in 0..300 {
        let snapshot = codes.clone();
        for (i, c) in codes.iter_mut().enumerate() {
            let mut push = vec![0.0; dim];
            for (j, o) in snapshot.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d: f64 = c.iter().zip(o).map(|(a, b)| a * b).sum();
                let w = d * d * d;
                for (p, x) in push.iter_mut().zip(o) {
                    *p += w * x;
                }
            }
            for (x, p) in c.iter_mut().zip(&push) {
                *x -= step * p;
            }
            normalize(c);
        }
    }
    codes
}

/// Worst-case gap between the score at the target offset and at any other
/// offset up to `max_offset`, for the given pair frequencies.
fn positional_margin(inv_freq: &[f64], max_offset: usize) -> f64 {
    let score = |u: usize| -> f64 {
        POSITIONAL_WEIGHTS.iter().zip(inv_freq).map(|(w, t)| w * (t * u as f64).cos()).sum()
    };
    let s0 = score(0);
    (1..=max_offset).map(|u| s0 - score(u)).fold(f64::INFINITY, f64::min)
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    dims: Dims,
    rng: Rng,
    inv_freq: Vec<f64>,
    blocks: Vec<BlockWeights>,
}

impl Builder<'_> {
    fn d(&self) -> usize {
        self.cfg.hidden_dim
    }

    fn hd(&self) -> usize {
        self.cfg.head_dim
    }

    fn noise(&mut self, rows: usize, cols: usize) -> Matrix {
        randn(rows, cols, NOISE_STD, &mut self.rng)
    }

    /// A block of tiny random weights with unit norms.
    fn quiet_block(&mut self) -> BlockWeights {
        let (d, f) = (self.d(), self.cfg.ffn_dim);
        BlockWeights {
            attn_norm: Matrix::filled(1, d, 1.0),
            wq: self.noise(d, d),
            wk: self.noise(d, d),
            wv: self.noise(d, d),
            wo: self.noise(d, d),
            ffn_norm: Matrix::filled(1, d, 1.0),
            w_gate: self.noise(d, f),
            w_up: self.noise(d, f),
            w_down: self.noise(f, d),
        }
    }

    /// Columns `cols` of `m` get random entries; the rest are untouched.
    fn random_cols(&mut self, m: &mut Matrix, cols: std::ops::Range<usize>, std: f64) {
        for r in 0..m.rows() {
            for c in cols.clone() {
                let v = m.get(r, c) + std * self.rng.normal();
                m.set(r, c, v);
            }
        }
    }

    /// Head `h` attends broadly and writes small random values into the
    /// spare dimensions.
    fn broad_head(&mut self, blk: &mut BlockWeights, h: usize) {
        let hd = self.hd();
        let cols = h * hd..(h + 1) * hd;
        self.random_cols(&mut blk.wq, cols.clone(), BROAD_QK_STD);
        self.random_cols(&mut blk.wk, cols.clone(), BROAD_QK_STD);
        self.random_cols(&mut blk.wv, cols.clone(), SPARE_WRITE_STD);
        let free = self.dims.free..self.d();
        for r in cols {
            for c in free.clone() {
                let v = blk.wo.get(r, c) + SPARE_WRITE_STD * self.rng.normal();
                blk.wo.set(r, c, v);
            }
        }
    }

    /// FFN that reads everything and writes only spare dimensions.
    fn spare_ffn(&mut self, blk: &mut BlockWeights) {
        let f = self.cfg.ffn_dim;
        self.random_cols(&mut blk.w_gate, 0..f, SPARE_WRITE_STD);
        self.random_cols(&mut blk.w_up, 0..f, SPARE_WRITE_STD);
        let free = self.dims.free..self.d();
        self.random_cols(&mut blk.w_down, free, SPARE_WRITE_STD);
    }

    /// Per-pair query phases and key amplitudes that make attention select
    /// the row `offset` positions back, with the logit margin fixed by
    /// `POSITIONAL_LOGIT_MARGIN` after unit normalised inputs.
    fn positional_qk(&self, offset: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
        let sqrt_hd = (self.hd() as f64).sqrt();
        let margin = positional_margin(&self.inv_freq, self.cfg.max_seq_len);
        let total = POSITIONAL_LOGIT_MARGIN * sqrt_hd / margin;
        let mut q = Vec::new();
        let mut k = Vec::new();
        for (f, &w) in POSITIONAL_WEIGHTS.iter().enumerate() {
            let amp = (w * total).sqrt();
            let phase = self.inv_freq[f] * offset as f64;
            q.push([amp * phase.cos(), -amp * phase.sin()]);
            k.push(amp);
        }
        (q, k)
    }
}

/// Builds the hand-wired backbone for `cfg` and the corpus vocabulary.
pub fn planted_backbone(cfg: &ModelConfig, vocab: &Vocab, seed: u64) -> Result<TransformerWeights> {
    cfg.validate()?;
    let dims = Dims::new();
    let free = dims.free;
    if cfg.hidden_dim < free + MIN_FREE_DIMS {
        return Err(Error::config(
            "model.hidden_dim",
            format!("the planted backbone needs at least {}", free + MIN_FREE_DIMS),
        ));
    }
    if cfg.head_dim != 32 {
        return Err(Error::config("model.head_dim", "the planted backbone is wired for width 32"));
    }
    if cfg.n_heads < 2 {
        return Err(Error::config("model.n_heads", "the planted backbone needs at least 2 heads"));
    }
    if cfg.n_layers < 3 {
        return Err(Error::config("model.n_layers", "the planted backbone needs at least 3 layers"));
    }
    if cfg.v_txt < vocab.text_value(vocab.n_values) || cfg.v_vis < vocab.vis_filler_start() {
        return Err(Error::config("model.v_txt", "vocabulary is smaller than the corpus needs"));
    }
    let half = cfg.head_dim / 2;
    let inv_freq: Vec<f64> =
        (0..half).map(|f| cfg.rope_base.powf(-2.0 * f as f64 / cfg.head_dim as f64)).collect();
    let margin = positional_margin(&inv_freq, cfg.max_seq_len);
    if margin < MIN_POSITIONAL_MARGIN {
        return Err(Error::config(
            "model.rope_base",
            format!("positional margin {margin:.3} is too small for the planted backbone"),
        ));
    }

    let mut rng = Rng::new(seed);
    let topic_codes = spherical_code(vocab.n_topics, TOPIC_DIMS, &mut rng.fork(1));
    let key_codes = spherical_code(vocab.n_keys, KEY_DIMS, &mut rng.fork(2));
    let value_codes = spherical_code(vocab.n_values, VALUE_DIMS, &mut rng.fork(3));
    let mut filler_rng = rng.fork(4);
    let mut filler_code = || -> Vec<f64> {
        let v: Vec<f64> = (0..FILLER_DIMS).map(|_| filler_rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };

    let d = cfg.hidden_dim;
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let write = |m: &mut Matrix, row: usize, start: usize, code: &[f64], scale: f64| {
        for (i, c) in code.iter().enumerate() {
            m.set(row, start + i, c * scale);
        }
    };

    // Embeddings: constant + modality + identity, each of unit norm.
    let mut vis_embed = Matrix::zeros(cfg.v_vis, d);
    for id in 0..cfg.v_vis {
        vis_embed.set(id, dims.konst, 1.0);
        vis_embed.set(id, dims.vis, 1.0);
        match vocab.vis_kind(id) {
            VisToken::Topic(i) => write(&mut vis_embed, id, dims.topic, &topic_codes[i], 1.0),
            VisToken::Key(i) => write(&mut vis_embed, id, dims.key, &key_codes[i], 1.0),
            VisToken::Value(i) => {
                write(&mut vis_embed, id, dims.value, &value_codes[i], inv_sqrt2);
                vis_embed.set(id, dims.value_flag, inv_sqrt2);
            }
            VisToken::Filler(_) => write(&mut vis_embed, id, dims.filler, &filler_code(), 1.0),
        }
    }
    let mut txt_embed = Matrix::zeros(cfg.v_txt, d);
    for id in 0..cfg.v_txt {
        txt_embed.set(id, dims.konst, 1.0);
        txt_embed.set(id, dims.txt, 1.0);
        match vocab.text_kind(id) {
            TextToken::Eos => txt_embed.set(id, dims.eos_in, 1.0),
            TextToken::Ask => txt_embed.set(id, dims.sink, 1.0),
            TextToken::Sep => txt_embed.set(id, dims.sep, 1.0),
            TextToken::None => txt_embed.set(id, dims.none, 1.0),
            TextToken::Topic(i) => write(&mut txt_embed, id, dims.topic, &topic_codes[i], 1.0),
            TextToken::Key(i) => write(&mut txt_embed, id, dims.key, &key_codes[i], 1.0),
            TextToken::Value(i) => {
                write(&mut txt_embed, id, dims.value, &value_codes[i], inv_sqrt2);
                txt_embed.set(id, dims.answer, inv_sqrt2);
            }
            TextToken::Unused => write(&mut txt_embed, id, dims.filler, &filler_code(), 1.0),
        }
    }

    let mut b = Builder { cfg, dims: dims.clone(), rng: rng.fork(5), inv_freq, blocks: Vec::new() };
    let hd = cfg.head_dim;
    // Normalised coordinate of a unit component in an embedding of norm √3.
    let nu0 = (d as f64).sqrt() / 3f64.sqrt();

    // Layer 0: previous-key head, lookup head, broad heads.
    let mut blk0 = b.quiet_block();
    {
        let (q1, k1) = b.positional_qk(1);
        let (q0, k0) = b.positional_qk(0);
        let (q6, _) = b.positional_qk(6);
        let (h_prev, h_look) = (0, hd);
        for f in 0..POSITIONAL_PAIRS {
            blk0.wq.set(dims.konst, h_prev + f, q1[f][0] / nu0);
            blk0.wq.set(dims.konst, h_prev + f + half, q1[f][1] / nu0);
            blk0.wk.set(dims.konst, h_prev + f, k1[f] / nu0);
            blk0.wq.set(dims.konst, h_look + f, q0[f][0] / nu0);
            blk0.wq.set(dims.konst, h_look + f + half, q0[f][1] / nu0);
            blk0.wk.set(dims.konst, h_look + f, k0[f] / nu0);
            // Answer tokens carry the flag at 1/√2 of unit strength.
            let answer_coord = nu0 * inv_sqrt2;
            blk0.wq.set(dims.answer, h_look + f, (q6[f][0] - q0[f][0]) / answer_coord);
            blk0.wq.set(dims.answer, h_look + f + half, (q6[f][1] - q0[f][1]) / answer_coord);
        }
        for i in 0..KEY_DIMS {
            blk0.wv.set(dims.key + i, h_prev + i, 1.0 / nu0);
            blk0.wo.set(h_prev + i, dims.prev_key + i, 1.0);
            blk0.wv.set(dims.key + i, h_look + i, 1.0 / nu0);
            blk0.wo.set(h_look + i, dims.lookup + i, 1.0);
        }
        for h in 2..cfg.n_heads {
            b.broad_head(&mut blk0, h);
        }
        b.spare_ffn(&mut blk0);
    }
    b.blocks.push(blk0);

    let reader = cfg.n_layers - 2;
    for l in 1..cfg.n_layers {
        let mut blk = b.quiet_block();
        if l == reader {
            wire_reader(&mut blk, cfg, &dims);
        } else {
            for h in 0..cfg.n_heads {
                b.broad_head(&mut blk, h);
            }
        }
        b.spare_ffn(&mut blk);
        b.blocks.push(blk);
    }

    let mut head = b.noise(d, cfg.v_txt);
    for (v, code) in value_codes.iter().enumerate() {
        for (i, c) in code.iter().enumerate() {
            head.set(dims.out + i, vocab.text_value(v), HEAD_GAIN * c);
        }
    }
    head.set(dims.eos_out, Vocab::EOS, HEAD_GAIN);

    let weights = TransformerWeights {
        vis_embed,
        txt_embed,
        blocks: b.blocks,
        final_norm: Matrix::filled(1, d, 1.0),
        head,
    };
    weights.validate(cfg)?;
    Ok(weights)
}

/// Every head of `blk` matches `lookup` at the question row against
/// `prev_key` at page rows, with a bonus for value tokens and a fallback to
/// the query's opening token.
fn wire_reader(blk: &mut BlockWeights, cfg: &ModelConfig, dims: &Dims) {
    let d = cfg.hidden_dim as f64;
    let hd = cfg.head_dim;
    let half = hd / 2;
    let sqrt_hd = (hd as f64).sqrt();
    // Typical normalised coordinate of a unit component at the reader: the
    // residual then holds the embedding plus two unit key codes.
    let nu = (d / 5.0).sqrt();
    let nu_sink = (d / 3.0).sqrt();
    let nu_value = (d / 4.0).sqrt();
    let content = (MATCH_LOGIT * sqrt_hd).sqrt() / nu;
    let sink_q = (SINK_LOGIT * sqrt_hd).sqrt() / nu;
    let sink_k = (SINK_LOGIT * sqrt_hd).sqrt() / nu_sink;
    let bonus_q = (VALUE_BONUS_LOGIT * sqrt_hd).sqrt() / nu;
    let bonus_k = (VALUE_BONUS_LOGIT * sqrt_hd).sqrt() / (nu_value * std::f64::consts::FRAC_1_SQRT_2);
    let n_heads = cfg.n_heads as f64;
    let value_gain = READ_NORM / (n_heads * nu_value * std::f64::consts::FRAC_1_SQRT_2);
    let eos_gain = READ_NORM / (n_heads * nu_sink);
    // Content uses the seven lowest-frequency pairs below the last one.
    let content_pairs = half - 1 - KEY_DIMS / 2..half - 1;
    let last = half - 1;
    for h in 0..cfg.n_heads {
        let base = h * hd;
        for (j, f) in content_pairs.clone().enumerate() {
            for (comp, col) in [(2 * j, base + f), (2 * j + 1, base + f + half)] {
                blk.wq.set(dims.lookup + comp, col, content);
                blk.wk.set(dims.prev_key + comp, col, content);
            }
        }
        blk.wq.set(dims.konst, base + last, sink_q);
        blk.wk.set(dims.sink, base + last, sink_k);
        blk.wq.set(dims.konst, base + last + half, bonus_q);
        blk.wk.set(dims.value_flag, base + last + half, bonus_k);
        for i in 0..VALUE_DIMS {
            blk.wv.set(dims.value + i, base + i, value_gain);
            blk.wo.set(base + i, dims.out + i, 1.0);
        }
        blk.wv.set(dims.sink, base + VALUE_DIMS, eos_gain);
        blk.wo.set(base + VALUE_DIMS, dims.eos_out, 1.0);
    }
}
