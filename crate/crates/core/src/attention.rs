//! Multi-head attention with learned relative-position logits.
//!
//! Relative logits `S_rel[q][k] = Q_q · E_{k−q}` are computed as `Q Eᵀ`
//! (`[T, R]`) and then skewed into query/key alignment, so no `[T, T, D]`
//! tensor is ever built.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{uniform, Ctx, FeedForward, LayerNorm, Linear};
use crate::numerics::{ParamId, ParamStore, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// `k ≤ q`
    Causal,
    /// `k ≥ q`
    Anticausal,
    Bidirectional,
}

impl MaskKind {
    /// `(min_rel, R)`: the relative distances `k − q` a length-`t` sequence
    /// can see under this mask.
    pub fn relative_range(self, t: usize) -> (isize, usize) {
        let t1 = t as isize - 1;
        match self {
            MaskKind::Causal => (-t1, t),
            MaskKind::Anticausal => (0, t),
            MaskKind::Bidirectional => (-t1, 2 * t - 1),
        }
    }
}

/// Boolean `rows × cols` matrix, `true` = attention allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Query `q` may read key `targets[q]` only.
    pub fn diagonal_cross(targets: &[usize], keys: usize) -> Self {
        let mut allowed = vec![false; targets.len() * keys];
        for (q, &k) in targets.iter().enumerate() {
            allowed[q * keys + k] = true;
        }
        Self { rows: targets.len(), cols: keys, allowed }
    }
}

pub fn build_mask(kind: MaskKind, n: usize) -> AttentionMask {
    let allowed = (0..n * n)
        .map(|i| {
            let (q, k) = (i / n, i % n);
            match kind {
                MaskKind::Causal => k <= q,
                MaskKind::Anticausal => k >= q,
                MaskKind::Bidirectional => true,
            }
        })
        .collect();
    AttentionMask { rows: n, cols: n, allowed }
}

/// Relative-position attention.
///
/// `q: [B, H, Tq, Dh]`, `k, v: [B, H, Tk, Dh]`, `table: [H, R, Dh]` where
/// row `r` embeds distance `min_rel + r`. Returns `[B, H, Tq, Dh]`. A row
/// with every key masked outputs zeros.
pub fn relative_attention<'g, S: Scalar>(
    q: Var<'g, S>,
    k: Var<'g, S>,
    v: Var<'g, S>,
    table: Option<(Var<'g, S>, isize)>,
    mask: Option<&AttentionMask>,
) -> Result<Var<'g, S>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 4 || ks.len() != 4 || ks != vs || qs[..2] != ks[..2] || qs[3] != ks[3] {
        return Err(Error::Shape(format!("attention shapes q {qs:?} k {ks:?} v {vs:?}")));
    }
    let (b, h, tq, dh) = (qs[0], qs[1], qs[2], qs[3]);
    let tk = ks[2];
    if let Some(m) = mask {
        if (m.rows, m.cols) != (tq, tk) {
            return Err(Error::Shape(format!("mask {}x{} for {tq}x{tk} logits", m.rows, m.cols)));
        }
    }
    let q3 = q.reshape(&[b * h, tq, dh]);
    let mut logits = q3.matmul_t(k.reshape(&[b * h, tk, dh]), false, true);
    if let Some((table, min_rel)) = table {
        let ts = table.shape();
        if ts.len() != 3 || ts[0] != h || ts[2] != dh {
            return Err(Error::Shape(format!("relative table {ts:?} for {h} heads of {dh}")));
        }
        let r = ts[1];
        let qer = q
            .permute(&[1, 0, 2, 3])
            .reshape(&[h, b * tq, dh])
            .matmul_t(table, false, true)
            .reshape(&[h, b, tq, r])
            .permute(&[1, 0, 2, 3])
            .reshape(&[b * h, tq, r]);
        logits = logits.add(qer.rel_shift(tk, min_rel));
    }
    let weights = logits.scale(S::of(1.0 / (dh as f64).sqrt())).masked_softmax(mask.map(AttentionMask::as_slice));
    Ok(weights.matmul(v.reshape(&[b * h, tk, dh])).reshape(&[b, h, tq, dh]))
}

/// Learned relative embeddings for sequences up to `max_len`, shared by
/// every layer of a stack.
#[derive(Clone, Debug)]
pub struct RelativeTable {
    pub id: ParamId,
    pub kind: MaskKind,
    pub max_len: usize,
}

impl RelativeTable {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        kind: MaskKind,
        max_len: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (_, r) = kind.relative_range(max_len);
        let bound = 1.0 / (head_dim as f64).sqrt();
        let id = store.add(format!("{name}.relative"), uniform(rng, &[heads, r, head_dim], bound));
        Self { id, kind, max_len }
    }

    /// The slice of the table a length-`t` sequence uses, with its `min_rel`.
    pub fn slice<'g, S: Scalar>(&self, table: Var<'g, S>, t: usize) -> Result<(Var<'g, S>, isize)> {
        if t == 0 || t > self.max_len {
            return Err(Error::invalid(format!("length {t} exceeds relative table of {}", self.max_len)));
        }
        let (min_rel, r) = self.kind.relative_range(t);
        let start = match self.kind {
            MaskKind::Anticausal => 0,
            MaskKind::Causal | MaskKind::Bidirectional => self.max_len - t,
        };
        Ok((table.narrow(1, start, r), min_rel))
    }
}

/// Query/key/value/output projections around [`relative_attention`].
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let inner = heads * head_dim;
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, inner, true, rng),
            k: Linear::new(store, &format!("{name}.k"), width, inner, true, rng),
            v: Linear::new(store, &format!("{name}.v"), width, inner, true, rng),
            o: Linear::new(store, &format!("{name}.o"), inner, width, true, rng),
            heads,
            head_dim,
        }
    }

    fn split<'g, S: Scalar>(&self, x: Var<'g, S>) -> Var<'g, S> {
        let s = x.shape();
        x.reshape(&[s[0], s[1], self.heads, self.head_dim]).permute(&[0, 2, 1, 3])
    }

    /// `xq: [B, Tq, W]` attends over `xkv: [B, Tk, W]`; returns `[B, Tq, W]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g, S: Scalar>(
        &self,
        p: &crate::numerics::Bound<'g, S>,
        ctx: &Ctx,
        xq: Var<'g, S>,
        xkv: Var<'g, S>,
        table: Option<(Var<'g, S>, isize)>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'g, S>> {
        let s = xq.shape();
        let q = self.split(self.q.forward(p, xq));
        let k = self.split(self.k.forward(p, xkv));
        let v = self.split(self.v.forward(p, xkv));
        let out = relative_attention(q, k, v, table, mask)?
            .permute(&[0, 2, 1, 3])
            .reshape(&[s[0], s[1], self.heads * self.head_dim]);
        Ok(ctx.dropout(self.o.forward(p, out)))
    }
}

/// Pre-norm self-attention plus feed-forward, both residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        head_dim: usize,
        feedforward: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, head_dim, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, feedforward, width, rng),
        }
    }

    pub fn forward<'g, S: Scalar>(
        &self,
        p: &crate::numerics::Bound<'g, S>,
        ctx: &Ctx,
        x: Var<'g, S>,
        table: Option<(Var<'g, S>, isize)>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'g, S>> {
        let xn = self.ln_attn.forward(p, x);
        let x = x.add(self.attn.forward(p, ctx, xn, xn, table, mask)?);
        Ok(self.feed_forward(p, ctx, x))
    }

    /// The residual feed-forward half on its own.
    pub fn feed_forward<'g, S: Scalar>(&self, p: &crate::numerics::Bound<'g, S>, ctx: &Ctx, x: Var<'g, S>) -> Var<'g, S> {
        x.add(ctx.dropout(self.ff.forward(p, ctx, self.ln_ff.forward(p, x))))
    }
}
