//! Differentiable building blocks: affine, normalization, attention,
//! feed-forward, transformer block, GRU cell, sinusoidal positions.
//!
//! Each block registers its weights in a [`ParamSet`] at construction and
//! offers `fwd` (tape, differentiable) plus, where inference needs it, an
//! `apply`/`step` path over plain arrays that reads the same weights.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::params::{init_linear, zeros, ParamId, ParamSet};
use super::tape::{softmax_rows, NodeId, Tape};

/// Row-convention affine map: `y = x·W + b` with `W: d_in×d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.register(&format!("{name}.w"), init_linear(rng, d_in, d_out));
        let b = Some(ps.register(&format!("{name}.b"), zeros(1, d_out)));
        Linear { w, b, d_in, d_out }
    }

    pub fn new_no_bias<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.register(&format!("{name}.w"), init_linear(rng, d_in, d_out));
        Linear { w, b: None, d_in, d_out }
    }

    /// Weights and bias start at zero (conditioning projections, joint output).
    pub fn zeroed(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.register(&format!("{name}.w"), zeros(d_in, d_out));
        let b = Some(ps.register(&format!("{name}.b"), zeros(1, d_out)));
        Linear { w, b, d_in, d_out }
    }

    pub fn fwd(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let w = t.param(self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }

    /// Non-tape forward for inference paths.
    pub fn apply(&self, ps: &ParamSet, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(ps.value(self.w));
        if let Some(b) = self.b {
            y += &ps.value(b).row(0);
        }
        y
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Unconditional LayerNorm with learnable scale (init 1) and shift (init 0).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        let gamma = ps.register(&format!("{name}.gamma"), Array2::ones((1, d)));
        let beta = ps.register(&format!("{name}.beta"), zeros(1, d));
        LayerNorm { gamma, beta }
    }

    pub fn fwd(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let normed = t.norm_rows(x, LN_EPS);
        let gamma = t.param(self.gamma);
        let beta = t.param(self.beta);
        t.scale_shift_rows(normed, gamma, beta)
    }

    pub fn apply(&self, ps: &ParamSet, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = normalize_rows(x);
        out *= &ps.value(self.gamma).row(0);
        out += &ps.value(self.beta).row(0);
        out
    }
}

fn normalize_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * r);
    }
    out
}

/// LayerNorm whose scale/shift are predicted from a speaker embedding:
/// γ(s) = 1 + Linear_γ(s), β(s) = Linear_β(s). Projections start at zero,
/// so at initialization this is exactly the unconditional LayerNorm.
#[derive(Debug, Clone)]
pub struct CondLayerNorm {
    pub gamma_proj: Linear,
    pub beta_proj: Linear,
}

impl CondLayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, d_speaker: usize) -> Self {
        CondLayerNorm {
            gamma_proj: Linear::zeroed(ps, &format!("{name}.gamma_proj"), d_speaker, d),
            beta_proj: Linear::zeroed(ps, &format!("{name}.beta_proj"), d_speaker, d),
        }
    }

    /// `speaker` is a 1×d_speaker node shared across the rows of `x`.
    pub fn fwd(&self, t: &mut Tape, x: NodeId, speaker: NodeId) -> NodeId {
        let normed = t.norm_rows(x, LN_EPS);
        let g = self.gamma_proj.fwd(t, speaker);
        let gamma = t.affine_const(g, 1.0, 1.0);
        let beta = self.beta_proj.fwd(t, speaker);
        t.scale_shift_rows(normed, gamma, beta)
    }

    pub fn apply(&self, ps: &ParamSet, x: &ArrayView2<f64>, speaker: &ArrayView2<f64>) -> Array2<f64> {
        let gamma = self.gamma_proj.apply(ps, speaker) + 1.0;
        let beta = self.beta_proj.apply(ps, speaker);
        let mut out = normalize_rows(x);
        out *= &gamma.row(0);
        out += &beta.row(0);
        out
    }
}

/// Rolling key/value store for incremental causal attention.
#[derive(Debug, Clone, Default)]
pub struct AttnCache {
    k: Option<Array2<f64>>,
    v: Option<Array2<f64>>,
}

impl AttnCache {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&mut self, k_new: Array2<f64>, v_new: Array2<f64>) {
        match (&mut self.k, &mut self.v) {
            (Some(k), Some(v)) => {
                k.append(Axis(0), k_new.view()).expect("cache append");
                v.append(Axis(0), v_new.view()).expect("cache append");
            }
            _ => {
                self.k = Some(k_new);
                self.v = Some(v_new);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, d: usize, heads: usize) -> Self {
        assert!(d % heads == 0, "model dim {d} not divisible by heads {heads}");
        MultiHeadAttention {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), d, d),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), d, d),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), d, d),
            wo: Linear::new(ps, rng, &format!("{name}.wo"), d, d),
            heads,
            d,
        }
    }

    /// Self- or cross-attention on the tape. `x_kv == x_q` for self-attention.
    pub fn fwd(&self, t: &mut Tape, x_q: NodeId, x_kv: NodeId, causal: bool) -> NodeId {
        let q = self.wq.fwd(t, x_q);
        let k = self.wk.fwd(t, x_kv);
        let v = self.wv.fwd(t, x_kv);
        let att = t.attention(q, k, v, self.heads, causal);
        self.wo.fwd(t, att)
    }

    /// Incremental causal step: project one new row, extend the cache, and
    /// attend over everything seen so far. Equivalent to the final row of a
    /// full causal recomputation.
    pub fn step(&self, ps: &ParamSet, cache: &mut AttnCache, x_row: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x_row.nrows(), 1, "step processes one position");
        let q = self.wq.apply(ps, x_row);
        let k_new = self.wk.apply(ps, x_row);
        let v_new = self.wv.apply(ps, x_row);
        cache.push(k_new, v_new);
        let k = cache.k.as_ref().unwrap();
        let v = cache.v.as_ref().unwrap();
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut att = Array2::zeros((1, self.d));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qs = q.slice(cols);
            let ks = k.slice(cols);
            let vs = v.slice(cols);
            let mut scores = qs.dot(&ks.t());
            scores *= scale;
            let p = softmax_rows(&scores.view());
            att.slice_mut(cols).assign(&p.dot(&vs));
        }
        self.wo.apply(ps, &att.view())
    }
}

/// Two-layer ReLU feed-forward.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, d: usize, d_ff: usize) -> Self {
        FeedForward {
            w1: Linear::new(ps, rng, &format!("{name}.w1"), d, d_ff),
            w2: Linear::new(ps, rng, &format!("{name}.w2"), d_ff, d),
        }
    }

    pub fn fwd(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let h = self.w1.fwd(t, x);
        let h = t.relu(h);
        self.w2.fwd(t, h)
    }

    pub fn apply(&self, ps: &ParamSet, x: &ArrayView2<f64>) -> Array2<f64> {
        let h = self.w1.apply(ps, x).mapv(|v| v.max(0.0));
        self.w2.apply(ps, &h.view())
    }
}

/// Sub-layer normalization: plain, or conditioned on a speaker embedding.
#[derive(Debug, Clone)]
pub enum Norm {
    Plain(LayerNorm),
    Cond(CondLayerNorm),
}

impl Norm {
    fn fwd(&self, t: &mut Tape, x: NodeId, speaker: Option<NodeId>) -> NodeId {
        match self {
            Norm::Plain(ln) => ln.fwd(t, x),
            Norm::Cond(cln) => cln.fwd(t, x, speaker.expect("conditioned norm needs a speaker")),
        }
    }
}

/// Pre-norm transformer block: `x + Attn(Norm(x))`, then `x + FF(Norm(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: Norm,
    pub attn: MultiHeadAttention,
    pub norm2: Norm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, Default)]
pub struct BlockCache {
    pub attn: AttnCache,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
        d_speaker: Option<usize>,
    ) -> Self {
        let make_norm = |ps: &mut ParamSet, n: &str| match d_speaker {
            Some(ds) => Norm::Cond(CondLayerNorm::new(ps, n, d, ds)),
            None => Norm::Plain(LayerNorm::new(ps, n, d)),
        };
        let norm1 = make_norm(ps, &format!("{name}.norm1"));
        let attn = MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), d, heads);
        let norm2 = make_norm(ps, &format!("{name}.norm2"));
        let ff = FeedForward::new(ps, rng, &format!("{name}.ff"), d, d_ff);
        TransformerBlock { norm1, attn, norm2, ff }
    }

    pub fn fwd(&self, t: &mut Tape, x: NodeId, speaker: Option<NodeId>, causal: bool) -> NodeId {
        let n1 = self.norm1.fwd(t, x, speaker);
        let a = self.attn.fwd(t, n1, n1, causal);
        let x = t.add(x, a);
        let n2 = self.norm2.fwd(t, x, speaker);
        let f = self.ff.fwd(t, n2);
        t.add(x, f)
    }

    /// Incremental causal step for plain-norm blocks (predictor path).
    pub fn step(&self, ps: &ParamSet, cache: &mut BlockCache, x_row: &ArrayView2<f64>) -> Array2<f64> {
        let Norm::Plain(n1) = &self.norm1 else { panic!("incremental step requires plain norms") };
        let Norm::Plain(n2) = &self.norm2 else { panic!("incremental step requires plain norms") };
        let a = self.attn.step(ps, &mut cache.attn, &n1.apply(ps, x_row).view());
        let x = x_row + &a;
        let f = self.ff.apply(ps, &n2.apply(ps, &x.view()).view());
        x + f
    }
}

/// Standard GRU cell; state and input are 1-row matrices.
#[derive(Debug, Clone)]
pub struct GruCell {
    wz: Linear,
    uz: Linear,
    wr: Linear,
    ur: Linear,
    wh: Linear,
    uh: Linear,
    pub d_hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, d_in: usize, d_hidden: usize) -> Self {
        GruCell {
            wz: Linear::new(ps, rng, &format!("{name}.wz"), d_in, d_hidden),
            uz: Linear::new_no_bias(ps, rng, &format!("{name}.uz"), d_hidden, d_hidden),
            wr: Linear::new(ps, rng, &format!("{name}.wr"), d_in, d_hidden),
            ur: Linear::new_no_bias(ps, rng, &format!("{name}.ur"), d_hidden, d_hidden),
            wh: Linear::new(ps, rng, &format!("{name}.wh"), d_in, d_hidden),
            uh: Linear::new_no_bias(ps, rng, &format!("{name}.uh"), d_hidden, d_hidden),
            d_hidden,
        }
    }

    /// `h' = (1−z)∘h + z∘tanh(x·Wh + (r∘h)·Uh + bh)`.
    pub fn fwd_step(&self, t: &mut Tape, x: NodeId, h: NodeId) -> NodeId {
        let gate = |t: &mut Tape, w: &Linear, u: &Linear, x, h| {
            let a = w.fwd(t, x);
            let b = u.fwd(t, h);
            t.add(a, b)
        };
        let z = gate(t, &self.wz, &self.uz, x, h);
        let z = t.sigmoid(z);
        let r = gate(t, &self.wr, &self.ur, x, h);
        let r = t.sigmoid(r);
        let rh = t.mul(r, h);
        let cand = gate(t, &self.wh, &self.uh, x, rh);
        let cand = t.tanh(cand);
        let neg_h = t.affine_const(h, -1.0, 0.0);
        let diff = t.add(cand, neg_h);
        let z_diff = t.mul(z, diff);
        t.add(h, z_diff)
    }
}

/// Fixed sinusoidal positional table: `PE[pos, 2i] = sin(pos·ω_i)`,
/// `PE[pos, 2i+1] = cos(pos·ω_i)`, `ω_i = 10000^(−2i/d)`.
pub fn positional_encoding(n: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((n, d));
    for pos in 0..n {
        for i in 0..d.div_ceil(2) {
            let omega = 10_000f64.powf(-2.0 * i as f64 / d as f64);
            let angle = pos as f64 * omega;
            pe[[pos, 2 * i]] = angle.sin();
            if 2 * i + 1 < d {
                pe[[pos, 2 * i + 1]] = angle.cos();
            }
        }
    }
    pe
}
