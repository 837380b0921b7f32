//! Contrastive predictive coding over subsequences with a quantization
//! bottleneck.
//!
//! Each subsequence `x_i` is embedded by a bidirectional GRU into
//! `z_i ∈ ℝ^{d_z}`, quantized, and lifted by an MLP to `z̃_i`. A
//! unidirectional GRU summarizes the last `K` lifted codes into `h_i`, and
//! the score of a candidate `z̃` for the `k`-th future chunk is
//! `exp(z̃ᵀ W_k h_i)`. Training minimizes InfoNCE plus the VQ loss.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Container, ENCODER_MAGIC};
use crate::config::{parse_flat, FlatConfig};
use crate::corpus::{Corpus, StructuredSequence};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Embedding, Gru, Linear};
use crate::numerics::{Adam, AdamConfig, Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::quantizer::{init_codebook, straight_through, usage_stats, vq_loss, Assignment, Codebook};

/// Where contrastive negatives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeMode {
    /// Any training subsequence.
    Uniform,
    /// Other positions of the anchor's own piece.
    SameSequence,
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeMode::Uniform => "uniform",
            NegativeMode::SameSequence => "same-seq",
        })
    }
}

impl FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NegativeMode::Uniform),
            "same-seq" | "same_seq" | "same-sequence" | "same_sequence" => Ok(NegativeMode::SameSequence),
            _ => Err(Error::invalid(format!("unknown negative mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Filled from the corpus when zero.
    pub vocab_size: usize,
    pub subsequence_tokens: usize,
    pub token_embedding_dim: usize,
    pub recurrent_hidden: usize,
    pub recurrent_layers: usize,
    pub z_dim: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub projection_hidden: usize,
    pub projection_layers: usize,
    pub projected_dim: usize,
    pub context_hidden: usize,
    pub context_layers: usize,
    pub k: usize,
    /// Negatives per positive (`N − 1`).
    pub negatives: usize,
    pub negative_mode: NegativeMode,
    /// Subsequences drawn per step to serve uniform negatives.
    pub uniform_pool: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub batch_pieces: usize,
    pub epochs: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            subsequence_tokens: 16,
            token_embedding_dim: 32,
            recurrent_hidden: 512,
            recurrent_layers: 2,
            z_dim: 3,
            codebook_size: 16,
            beta: 0.25,
            projection_hidden: 512,
            projection_layers: 2,
            projected_dim: 32,
            context_hidden: 512,
            context_layers: 2,
            k: 6,
            negatives: 15,
            negative_mode: NegativeMode::SameSequence,
            uniform_pool: 256,
            dropout: 0.1,
            learning_rate: 1e-4,
            clip_norm: 0.0,
            batch_pieces: 8,
            epochs: 20,
        }
    }
}

crate::flat_config!(EncoderConfig {
    vocab_size,
    subsequence_tokens,
    token_embedding_dim,
    recurrent_hidden,
    recurrent_layers,
    z_dim,
    codebook_size,
    beta,
    projection_hidden,
    projection_layers,
    projected_dim,
    context_hidden,
    context_layers,
    k,
    negatives,
    negative_mode,
    uniform_pool,
    dropout,
    learning_rate,
    clip_norm,
    batch_pieces,
    epochs,
});

impl EncoderConfig {
    /// Sizes that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            recurrent_hidden: 64,
            recurrent_layers: 1,
            projection_hidden: 64,
            context_hidden: 64,
            context_layers: 1,
            dropout: 0.0,
            learning_rate: 3e-3,
            clip_norm: 5.0,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.token_embedding_dim,
            self.recurrent_hidden,
            self.recurrent_layers,
            self.z_dim,
            self.projection_hidden,
            self.projection_layers,
            self.projected_dim,
            self.context_hidden,
            self.context_layers,
            self.k,
            self.negatives,
            self.batch_pieces,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("encoder dimensions, K, negatives and batch size must be positive"));
        }
        if self.subsequence_tokens == 0 || !self.subsequence_tokens.is_multiple_of(4) {
            return Err(Error::invalid("subsequence_tokens must be a positive multiple of 4"));
        }
        if self.codebook_size < 2 {
            return Err(Error::invalid("codebook_size must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.learning_rate <= 0.0 || self.beta < 0.0 {
            return Err(Error::invalid("dropout must lie in [0, 1), learning_rate > 0, beta >= 0"));
        }
        Ok(())
    }
}

/// Anything that turns a structured sequence into one code per subsequence.
pub trait CodeEncoder {
    fn subsequence_tokens(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn codebook(&self) -> Codebook;
    /// Pre-quantization vectors `z_i`, one per subsequence.
    fn embed_sequence(&self, seq: &StructuredSequence) -> Result<Vec<Vec<f64>>>;
    /// Serialized checkpoint, used to fingerprint the encoder.
    fn checkpoint_bytes(&self) -> Vec<u8>;

    fn codebook_size(&self) -> usize {
        self.codebook().size()
    }

    fn encode_sequence(&self, seq: &StructuredSequence) -> Result<Vec<usize>> {
        let book = self.codebook();
        self.embed_sequence(seq)?.iter().map(|z| crate::quantizer::quantize(z, &book).map(|a| a.index)).collect()
    }
}

/// Parameter layout of the encoder.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    embed: Embedding,
    gru: Gru,
    to_z: Linear,
    pub codebook: ParamId,
    projection: Vec<Linear>,
    context: Gru,
    context_head: Linear,
    pub scorers: ParamId,
}

/// How the quantization bottleneck is applied in [`EncoderModel::loss`].
pub enum Bottleneck<'a, S: Scalar> {
    /// Nearest-centroid assignment with the straight-through adjoint.
    Quantize,
    /// Every `sg[·]` replaced by its value at a base point (`z`, centroids
    /// and assignments recorded there): the estimator becomes an ordinary
    /// function of the weights, so finite differences can check it.
    Frozen { z: &'a Tensor<S>, centroids: &'a Tensor<S>, assignments: &'a [usize] },
    /// No quantization: `z` passes through.
    Identity,
}

/// `(z^q, VQ loss, assignments)` for `z: [n, d_z]` under `bottleneck`.
pub fn apply_bottleneck<'g, S: Scalar>(
    z: Var<'g, S>,
    book: Var<'g, S>,
    beta: f64,
    bottleneck: Bottleneck<'_, S>,
) -> Result<(Var<'g, S>, Var<'g, S>, Vec<usize>)> {
    let g = z.graph();
    Ok(match bottleneck {
        Bottleneck::Quantize => {
            let (zq, idx) = straight_through(z, &book.value());
            (zq, vq_loss(z, book, &idx, beta)?, idx)
        }
        Bottleneck::Frozen { z: z0, centroids, assignments } => {
            let c0 = g.constant(centroids.clone()).gather_rows(Rc::new(assignments.to_vec()));
            let z0 = g.constant(z0.clone());
            let zq = z.add(c0.sub(z0));
            let codebook = z0.sub(book.gather_rows(Rc::new(assignments.to_vec()))).square().sum_last();
            let commit = z.sub(c0).square().sum_last();
            (zq, codebook.add(commit.scale(S::of(beta))).mean(), assignments.to_vec())
        }
        Bottleneck::Identity => (z, g.constant(Tensor::scalar(S::zero())), Vec::new()),
    })
}

/// Terms of the training objective.
pub struct LossParts<'g, S: Scalar> {
    pub nce: Var<'g, S>,
    pub vq: Var<'g, S>,
    /// Pre-quantization `z` of every row, `[rows, d_z]`.
    pub z: Var<'g, S>,
    pub assignments: Vec<usize>,
}

impl EncoderModel {
    pub fn build<S: Scalar>(config: &EncoderConfig, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let embed = Embedding::new(store, "enc.embed", c.vocab_size, c.token_embedding_dim, rng);
        let gru = Gru::new(store, "enc.gru", c.token_embedding_dim, c.recurrent_hidden, c.recurrent_layers, true, rng);
        let to_z = Linear::new(store, "enc.to_z", 2 * c.recurrent_hidden, c.z_dim, true, rng);
        let codebook = store.add("enc.codebook", Tensor::zeros(&[c.codebook_size, c.z_dim]));
        let mut projection = Vec::new();
        let mut width = c.z_dim;
        for i in 0..c.projection_layers {
            let out = if i + 1 == c.projection_layers { c.projected_dim } else { c.projection_hidden };
            projection.push(Linear::new(store, &format!("enc.proj.{i}"), width, out, true, rng));
            width = out;
        }
        let context = Gru::new(store, "enc.context", c.projected_dim, c.context_hidden, c.context_layers, false, rng);
        let context_head = Linear::new(store, "enc.context_head", c.context_hidden, c.projected_dim, true, rng);
        let scorers = store.add("enc.scorers", Tensor::zeros(&[c.k, c.projected_dim, c.projected_dim]));
        Ok(Self { config: config.clone(), embed, gru, to_z, codebook, projection, context, context_head, scorers })
    }

    /// `z` for `tokens.len() / l` subsequences laid end to end; `[n, d_z]`.
    pub fn embed<'g, S: Scalar>(&self, p: &Bound<'g, S>, ctx: &Ctx, tokens: &[usize]) -> Result<Var<'g, S>> {
        let l = self.config.subsequence_tokens;
        if tokens.is_empty() || !tokens.len().is_multiple_of(l) {
            return Err(Error::Shape(format!("{} tokens are not whole subsequences of {l}", tokens.len())));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token index {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        let n = tokens.len() / l;
        let e = self.embed.forward(p, tokens).reshape(&[n, l, self.config.token_embedding_dim]).permute(&[1, 0, 2]);
        let out = self.gru.forward(p, ctx, ctx.dropout(e));
        let both = out.sequence.graph().concat(&[out.last[0], out.last[1]], 1);
        Ok(self.to_z.forward(p, both))
    }

    /// The MLP lift `z^q → z̃`.
    pub fn project<'g, S: Scalar>(&self, p: &Bound<'g, S>, ctx: &Ctx, zq: Var<'g, S>) -> Var<'g, S> {
        let mut x = zq;
        for (i, lin) in self.projection.iter().enumerate() {
            x = lin.forward(p, x);
            if i + 1 < self.projection.len() {
                x = ctx.dropout(x.relu());
            }
        }
        x
    }

    /// `h` for every window. `pool: [rows + 1, d]` ends with a zero row;
    /// `windows` lists `K` pool rows per anchor, time-major (`[K, A]`).
    pub fn context<'g, S: Scalar>(&self, p: &Bound<'g, S>, ctx: &Ctx, pool: Var<'g, S>, windows: &[usize]) -> Var<'g, S> {
        let (k, d) = (self.config.k, self.config.projected_dim);
        let a = windows.len() / k;
        let seq = pool.gather_rows(Rc::new(windows.to_vec())).reshape(&[k, a, d]);
        let out = self.context.forward(p, ctx, seq);
        self.context_head.forward(p, out.last[0])
    }

    /// InfoNCE and VQ losses for `batch`.
    pub fn loss<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        ctx: &Ctx,
        batch: &NceBatch,
        bottleneck: Bottleneck<'_, S>,
    ) -> Result<LossParts<'g, S>> {
        let c = &self.config;
        let z = self.embed(p, ctx, &batch.tokens)?;
        let g = z.graph();
        let (zq, vq, assignments) = apply_bottleneck(z, p.get(self.codebook), c.beta, bottleneck)?;
        let zt = self.project(p, ctx, zq);
        let d = c.projected_dim;
        let pool = g.concat(&[zt, g.constant(Tensor::zeros(&[1, d]))], 0);
        let h = self.context(p, ctx, pool, &batch.windows);
        let anchors = batch.windows.len() / c.k;
        let wh = h
            .matmul_t(p.get(self.scorers).reshape(&[c.k * d, d]), false, true)
            .reshape(&[anchors * c.k, d]);
        let m = batch.terms.len();
        let n = c.negatives + 1;
        let ws = wh.gather_rows(Rc::new(batch.terms.clone())).reshape(&[m, d, 1]);
        let cand = zt.gather_rows(Rc::new(batch.candidates.clone())).reshape(&[m, n, d]);
        let logits = cand.matmul(ws).reshape(&[m, n]);
        Ok(LossParts { nce: info_nce(logits), vq, z, assignments })
    }
}

/// `mean_m −log softmax(logits_m)[0]`: column 0 holds the positive.
pub fn info_nce<'g, S: Scalar>(logits: Var<'g, S>) -> Var<'g, S> {
    let rows = logits.shape()[0];
    logits.log_softmax().pick_last(Rc::new(vec![0; rows])).mean().scale(S::of(-1.0))
}

/// Seeded source of negative positions.
pub struct NegativeSampler {
    pub mode: NegativeMode,
    rng: ChaCha8Rng,
}

impl NegativeSampler {
    pub fn new(mode: NegativeMode, seed: u64) -> Self {
        Self { mode, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// `count` negatives, with replacement, for the positive at
    /// `(piece, position)` of a corpus whose pieces have `lens` subsequences.
    /// Returns `(piece, position)` pairs, never the positive itself.
    pub fn sample(&mut self, lens: &[usize], piece: usize, position: usize, count: usize) -> Result<Vec<(usize, usize)>> {
        match self.mode {
            NegativeMode::SameSequence => {
                let len = lens[piece];
                if len < count + 1 {
                    return Err(Error::invalid(format!(
                        "piece {piece} has {len} subsequences; same-sequence sampling needs at least {}",
                        count + 1
                    )));
                }
                Ok((0..count).map(|_| (piece, self.skip_draw(len, position))).collect())
            }
            NegativeMode::Uniform => {
                let total: usize = lens.iter().sum();
                if total < 2 {
                    return Err(Error::invalid("uniform sampling needs at least two subsequences"));
                }
                let flat = lens[..piece].iter().sum::<usize>() + position;
                Ok((0..count).map(|_| locate(lens, self.skip_draw(total, flat))).collect())
            }
        }
    }

    /// Uniform over `0..n` without `skip`.
    fn skip_draw(&mut self, n: usize, skip: usize) -> usize {
        let j = self.rng.gen_range(0..n - 1);
        if j >= skip {
            j + 1
        } else {
            j
        }
    }

    /// `count` draws from `pool` avoiding entries equal to `positive`;
    /// returns pool indices.
    pub fn sample_pool(&mut self, pool: &[(usize, usize)], positive: (usize, usize), count: usize) -> Result<Vec<usize>> {
        let allowed: Vec<usize> = (0..pool.len()).filter(|&i| pool[i] != positive).collect();
        if allowed.is_empty() {
            return Err(Error::invalid("negative pool holds only the positive"));
        }
        Ok((0..count).map(|_| allowed[self.rng.gen_range(0..allowed.len())]).collect())
    }
}

fn locate(lens: &[usize], mut flat: usize) -> (usize, usize) {
    for (p, &l) in lens.iter().enumerate() {
        if flat < l {
            return (p, flat);
        }
        flat -= l;
    }
    unreachable!("flat index inside corpus")
}

/// Token rows and index plans for one contrastive step.
#[derive(Clone, Debug, PartialEq)]
pub struct NceBatch {
    /// Subsequences laid end to end: the batch pieces, then the pool.
    pub tokens: Vec<usize>,
    pub rows: usize,
    /// `K` rows per anchor, time-major; `rows` is the zero padding row.
    pub windows: Vec<usize>,
    /// `anchor · K + (k − 1)` per term.
    pub terms: Vec<usize>,
    /// `N` rows per term, the positive first.
    pub candidates: Vec<usize>,
}

impl NceBatch {
    /// Plans anchors, windows and candidates for `batch` pieces of `seqs`.
    /// Uniform negatives come from `pool` (`(piece, position)` pairs), which
    /// is embedded after the batch rows.
    pub fn build(
        seqs: &[StructuredSequence],
        batch: &[usize],
        pool: &[(usize, usize)],
        sampler: &mut NegativeSampler,
        k: usize,
        negatives: usize,
    ) -> Result<Self> {
        let lens: Vec<usize> = seqs.iter().map(StructuredSequence::len).collect();
        let mut tokens = Vec::new();
        let mut starts = Vec::with_capacity(batch.len());
        let mut rows = 0;
        for &b in batch {
            starts.push(rows);
            tokens.extend_from_slice(seqs[b].tokens());
            rows += lens[b];
        }
        let pool_start = rows;
        if sampler.mode == NegativeMode::Uniform {
            for &(piece, pos) in pool {
                tokens.extend_from_slice(seqs[piece].subsequence(pos));
            }
            rows += pool.len();
        }
        let mut anchor_rows = Vec::new();
        let mut terms = Vec::new();
        let mut candidates = Vec::new();
        for (bi, &b) in batch.iter().enumerate() {
            let len = lens[b];
            for i in 0..len.saturating_sub(1) {
                let anchor = anchor_rows.len();
                anchor_rows.push((starts[bi], i));
                for kk in 1..=k.min(len - 1 - i) {
                    let pos = i + kk;
                    terms.push(anchor * k + kk - 1);
                    candidates.push(starts[bi] + pos);
                    match sampler.mode {
                        NegativeMode::SameSequence => {
                            for (_, q) in sampler.sample(&lens, b, pos, negatives)? {
                                candidates.push(starts[bi] + q);
                            }
                        }
                        NegativeMode::Uniform => {
                            for j in sampler.sample_pool(pool, (b, pos), negatives)? {
                                candidates.push(pool_start + j);
                            }
                        }
                    }
                }
            }
        }
        if terms.is_empty() {
            return Err(Error::invalid("no piece has a future chunk to predict"));
        }
        let a = anchor_rows.len();
        let mut windows = vec![rows; k * a];
        for (ai, &(start, i)) in anchor_rows.iter().enumerate() {
            for t in 0..k {
                // slot t holds position i − (K − 1 − t)
                if let Some(pos) = (i + t + 1).checked_sub(k) {
                    windows[t * a + ai] = start + pos;
                }
            }
        }
        Ok(Self { tokens, rows, windows, terms, candidates })
    }
}

/// Per-epoch training log line.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderMetrics {
    pub epoch: usize,
    pub nce: f64,
    pub vq: f64,
    pub perplexity: f64,
}

/// Trained encoder: layout, weights and provenance.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub model: EncoderModel,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam>,
    pub seed: u64,
    pub epoch: usize,
}

impl EncoderState {
    /// Fresh weights with zero scorers and a zero codebook.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let model = EncoderModel::build(config, &mut params, &mut rng)?;
        Ok(Self { model, params, optimizer: None, seed, epoch: 0 })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.model.config
    }

    fn eval_z(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let z = self.model.embed(&p, &Ctx::eval(), tokens)?;
        let out = z.value();
        Ok((*out).clone())
    }

    /// `z` of many subsequences, evaluated in chunks.
    pub fn embed_many(&self, subsequences: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(subsequences.len());
        for chunk in subsequences.chunks(512) {
            let tokens: Vec<usize> = chunk.concat();
            let z = self.eval_z(&tokens)?;
            out.extend(z.data().chunks(self.config().z_dim).map(|r| r.iter().map(|&x| x as f64).collect::<Vec<_>>()));
        }
        Ok(out)
    }

    pub fn embed_subsequence(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.len() != self.config().subsequence_tokens {
            return Err(Error::Shape(format!(
                "{} tokens for subsequences of {}",
                tokens.len(),
                self.config().subsequence_tokens
            )));
        }
        Ok(self.embed_many(&[tokens])?.remove(0))
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<Assignment> {
        crate::quantizer::quantize(&self.embed_subsequence(tokens)?, &self.codebook())
    }

    /// `h` from up to `K` lifted codes ending at the current position,
    /// left-padded with zero vectors.
    pub fn build_context(&self, window: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (k, d) = (self.config().k, self.config().projected_dim);
        if window.is_empty() || window.len() > k {
            return Err(Error::invalid(format!("context window of {} vectors (K = {k})", window.len())));
        }
        if window.iter().any(|w| w.len() != d) {
            return Err(Error::Shape(format!("context vectors must have dimension {d}")));
        }
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let rows: Vec<f32> = window.iter().flatten().map(|&x| x as f32).chain(std::iter::repeat_n(0.0, d)).collect();
        let pool = g.constant(Tensor::new(&[window.len() + 1, d], rows)?);
        let pad = k - window.len();
        let idx: Vec<usize> = (0..k).map(|t| if t < pad { window.len() } else { t - pad }).collect();
        let h = self.model.context(&p, &Ctx::eval(), pool, &idx);
        Ok(h.value().to_f64_vec())
    }

    /// `z̃^q` for a quantized (or raw) `z`.
    pub fn project(&self, zq: &[f64]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let x = g.constant(Tensor::from_f64(&[1, zq.len()], zq)?);
        Ok(self.model.project(&p, &Ctx::eval(), x).value().to_f64_vec())
    }

    /// `exp(z̃ᵀ W_k h)` for `k ∈ 1..=K`.
    pub fn score(&self, z: &[f64], h: &[f64], k: usize) -> Result<f64> {
        let (kmax, d) = (self.config().k, self.config().projected_dim);
        if k == 0 || k > kmax {
            return Err(Error::invalid(format!("k = {k} outside 1..={kmax}")));
        }
        if z.len() != d || h.len() != d {
            return Err(Error::Shape(format!("score vectors must have dimension {d}")));
        }
        let w = self.params.get(self.model.scorers);
        let wk = &w.data()[(k - 1) * d * d..k * d * d];
        let form: f64 = (0..d).map(|r| z[r] * (0..d).map(|c| wk[r * d + c] as f64 * h[c]).sum::<f64>()).sum();
        Ok(form.exp())
    }

    pub fn set_scorer(&mut self, k: usize, w: &[f64]) -> Result<()> {
        let d = self.config().projected_dim;
        if k == 0 || k > self.config().k || w.len() != d * d {
            return Err(Error::invalid("scorer index or size"));
        }
        let t = self.params.get_mut(self.model.scorers);
        for (dst, &src) in t.data_mut()[(k - 1) * d * d..k * d * d].iter_mut().zip(w) {
            *dst = src as f32;
        }
        Ok(())
    }

    pub fn set_codebook(&mut self, book: &Codebook) -> Result<()> {
        if book.size() != self.config().codebook_size || book.dim() != self.config().z_dim {
            return Err(Error::Shape("codebook does not match the encoder configuration".into()));
        }
        self.params.set(self.model.codebook, book.to_tensor());
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ENCODER_MAGIC);
        c.put_text("config", self.config().to_text());
        c.put_text("seed", self.seed.to_string());
        c.put_text("epoch", self.epoch.to_string());
        c.put_store("param", &self.params);
        if let Some(adam) = &self.optimizer {
            c.put_adam("adam", adam, &self.params);
        }
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes, ENCODER_MAGIC)?;
        let mut config = EncoderConfig::default();
        config.apply(&parse_flat(c.text("config")?)?)?;
        let mut state = Self::init(&config, c.parsed("seed")?)?;
        state.epoch = c.parsed("epoch")?;
        c.load_store("param", &mut state.params)?;
        if c.text("adam.step").is_ok() {
            let mut adam = Adam::new(AdamConfig::default(), &state.params);
            c.load_adam("adam", &mut adam, &state.params)?;
            state.optimizer = Some(adam);
        }
        Ok(state)
    }
}

impl CodeEncoder for EncoderState {
    fn subsequence_tokens(&self) -> usize {
        self.config().subsequence_tokens
    }

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn codebook(&self) -> Codebook {
        Codebook::from_tensor(self.params.get(self.model.codebook), self.config().beta).expect("codebook shape")
    }

    fn embed_sequence(&self, seq: &StructuredSequence) -> Result<Vec<Vec<f64>>> {
        if seq.subsequence_tokens() != self.subsequence_tokens() {
            return Err(Error::Shape(format!(
                "sequence cut into {}-token subsequences, encoder expects {}",
                seq.subsequence_tokens(),
                self.subsequence_tokens()
            )));
        }
        self.embed_many(&seq.subsequences().collect::<Vec<_>>())
    }

    fn checkpoint_bytes(&self) -> Vec<u8> {
        self.to_bytes()
    }
}

/// Result of [`train_encoder`].
pub struct EncoderRun {
    pub state: EncoderState,
    /// Row 0 is measured at initialization, before any update.
    pub metrics: Vec<EncoderMetrics>,
}

/// Jointly minimizes InfoNCE and the VQ loss with Adam.
///
/// `progress` sees each metrics row as soon as it is computed.
pub fn train_encoder(
    corpus: &Corpus,
    config: &EncoderConfig,
    seed: u64,
    mut progress: impl FnMut(&EncoderMetrics),
) -> Result<EncoderRun> {
    let mut config = config.clone();
    if config.vocab_size == 0 {
        config.vocab_size = corpus.vocab.len();
    }
    config.validate()?;
    let seqs = corpus.sequences(config.subsequence_tokens)?;
    if seqs.is_empty() {
        return Err(Error::invalid("cannot train on an empty corpus"));
    }
    let mut state = EncoderState::init(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let all: Vec<(usize, usize)> = seqs.iter().enumerate().flat_map(|(p, s)| (0..s.len()).map(move |i| (p, i))).collect();

    // codebook from C random encoder outputs
    let picks: Vec<&[usize]> = all
        .choose_multiple(&mut rng, config.codebook_size.min(all.len()))
        .map(|&(p, i)| seqs[p].subsequence(i))
        .collect();
    let samples = state.embed_many(&picks)?;
    let book = init_codebook(&samples, config.codebook_size, config.beta, rng.gen())?;
    state.set_codebook(&book)?;

    let mut sampler = NegativeSampler::new(config.negative_mode, rng.gen());
    let mut adam = Adam::new(
        AdamConfig { learning_rate: config.learning_rate, clip_norm: config.clip_norm, ..AdamConfig::default() },
        &state.params,
    );
    let draw_pool = |rng: &mut ChaCha8Rng| -> Vec<(usize, usize)> {
        if config.negative_mode == NegativeMode::Uniform {
            (0..config.uniform_pool).map(|_| all[rng.gen_range(0..all.len())]).collect()
        } else {
            Vec::new()
        }
    };

    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut metrics = Vec::new();
    {
        // initial evaluation with the same batching, no updates
        let (mut nce, mut vq, mut codes, mut steps) = (0.0, 0.0, Vec::new(), 0.0);
        let mut eval_sampler = NegativeSampler::new(config.negative_mode, seed);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
        for batch in order.chunks(config.batch_pieces) {
            let pool = draw_pool(&mut eval_rng);
            let plan = NceBatch::build(&seqs, batch, &pool, &mut eval_sampler, config.k, config.negatives)?;
            let g = Graph::new();
            let p = state.params.bind_frozen(&g);
            let parts = state.model.loss(&p, &Ctx::eval(), &plan, Bottleneck::Quantize)?;
            nce += parts.nce.item().as_f64();
            vq += parts.vq.item().as_f64();
            codes.extend_from_slice(&parts.assignments);
            steps += 1.0;
        }
        let row = EncoderMetrics {
            epoch: 0,
            nce: nce / steps,
            vq: vq / steps,
            perplexity: usage_stats(&codes, config.codebook_size)?.perplexity,
        };
        progress(&row);
        metrics.push(row);
    }

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut nce, mut vq, mut codes, mut steps) = (0.0, 0.0, Vec::new(), 0.0);
        for (step, batch) in order.chunks(config.batch_pieces).enumerate() {
            let pool = draw_pool(&mut rng);
            let plan = NceBatch::build(&seqs, batch, &pool, &mut sampler, config.k, config.negatives)?;
            let ctx = if config.dropout > 0.0 { Ctx::train(config.dropout, rng.gen()) } else { Ctx::eval() };
            let grads = {
                let g = Graph::new();
                let p = state.params.bind(&g);
                let parts = state.model.loss(&p, &ctx, &plan, Bottleneck::Quantize)?;
                let total = parts.nce.add(parts.vq);
                let value = total.item().as_f64();
                if !value.is_finite() {
                    state.optimizer = Some(adam.clone());
                    state.epoch = epoch - 1;
                    return Err(Error::Diverged { epoch, step, last_good: state.to_bytes() });
                }
                nce += parts.nce.item().as_f64();
                vq += parts.vq.item().as_f64();
                codes.extend_from_slice(&parts.assignments);
                steps += 1.0;
                let grads = p.collect(&g.backward(total));
                if !grads.is_finite() {
                    state.optimizer = Some(adam.clone());
                    state.epoch = epoch - 1;
                    return Err(Error::Diverged { epoch, step, last_good: state.to_bytes() });
                }
                grads
            };
            adam.update(&mut state.params, &grads);
        }
        state.epoch = epoch;
        let row = EncoderMetrics {
            epoch,
            nce: nce / steps,
            vq: vq / steps,
            perplexity: usage_stats(&codes, config.codebook_size)?.perplexity,
        };
        progress(&row);
        metrics.push(row);
    }
    state.optimizer = Some(adam);
    Ok(EncoderRun { state, metrics })
}

/// Codes of every piece of `corpus`.
pub fn encode_corpus(encoder: &dyn CodeEncoder, corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
    corpus.sequences(encoder.subsequence_tokens())?.iter().map(|s| encoder.encode_sequence(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_corpus, SynthConfig};
    use crate::numerics::{gradcheck, GradcheckOptions};

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 8,
            subsequence_tokens: 8,
            token_embedding_dim: 4,
            recurrent_hidden: 5,
            recurrent_layers: 1,
            z_dim: 2,
            codebook_size: 4,
            projection_hidden: 6,
            projection_layers: 2,
            projected_dim: 4,
            context_hidden: 5,
            context_layers: 1,
            k: 2,
            negatives: 2,
            dropout: 0.0,
            ..EncoderConfig::default()
        }
    }

    fn toy_seqs(rng: &mut ChaCha8Rng, pieces: usize, len: usize) -> Vec<StructuredSequence> {
        (0..pieces)
            .map(|_| {
                let t: Vec<usize> = (0..len * 8).map(|_| rng.gen_range(0..8)).collect();
                crate::corpus::split_subsequences(&t, 8).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_scorers_give_log_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seqs = toy_seqs(&mut rng, 2, 5);
        for negatives in [1usize, 3] {
            let config = EncoderConfig { negatives, ..toy_config() };
            let state = EncoderState::init(&config, 1).unwrap();
            let mut sampler = NegativeSampler::new(NegativeMode::SameSequence, 2);
            let plan = NceBatch::build(&seqs, &[0, 1], &[], &mut sampler, config.k, negatives).unwrap();
            let store = state.params.cast::<f64>();
            let g = Graph::new();
            let p = store.bind(&g);
            let parts = state.model.loss(&p, &Ctx::eval(), &plan, Bottleneck::Quantize).unwrap();
            assert!((parts.nce.item() - ((negatives + 1) as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn info_nce_example() {
        let g = Graph::<f64>::new();
        let logits = g.constant(Tensor::new(&[1, 4], vec![2.0, 0.0, 0.0, 0.0]).unwrap());
        let oracle = -(2f64.exp() / (2f64.exp() + 3.0)).ln();
        assert!((info_nce(logits).item() - oracle).abs() < 1e-14);
        assert!((oracle - 0.3409).abs() < 5e-4);
    }

    #[test]
    fn score_examples() {
        let config = EncoderConfig { projected_dim: 3, ..toy_config() };
        let mut state = EncoderState::init(&config, 0).unwrap();
        let (z, h) = ([1.0, 0.0, 0.0], [2.0, 0.0, 0.0]);
        assert_eq!(state.score(&z, &h, 1).unwrap(), 1.0);
        state.set_scorer(1, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((state.score(&z, &h, 1).unwrap() - 2f64.exp()).abs() < 1e-12);
        let z3 = [3.0, 0.0, 0.0];
        assert!((state.score(&z3, &h, 1).unwrap() - state.score(&z, &h, 1).unwrap().powi(3)).abs() < 1e-6);
        assert!(state.score(&z, &h, 0).is_err());
        assert!(state.score(&z, &h, 3).is_err());
    }

    #[test]
    fn sampler_examples() {
        let lens = vec![24, 24, 24];
        let mut s = NegativeSampler::new(NegativeMode::SameSequence, 3);
        let draws: Vec<(usize, usize)> = (0..40).flat_map(|_| s.sample(&lens, 1, 10, 15).unwrap()).collect();
        assert!(draws.iter().all(|&(p, i)| p == 1 && i != 10 && i < 24));
        let mut seen = [false; 24];
        for &(_, i) in &draws {
            seen[i] = true;
        }
        assert_eq!(seen.iter().filter(|&&x| x).count(), 23);
        assert!(s.sample(&[8], 0, 0, 15).is_err());

        let mut a = NegativeSampler::new(NegativeMode::Uniform, 4);
        let mut b = NegativeSampler::new(NegativeMode::SameSequence, 4);
        assert_eq!(a.sample(&[20], 0, 5, 15).unwrap(), b.sample(&[20], 0, 5, 15).unwrap());
        let mut c = NegativeSampler::new(NegativeMode::Uniform, 4);
        assert_eq!(NegativeSampler::new(NegativeMode::Uniform, 4).sample(&lens, 2, 3, 50).unwrap(), c.sample(&lens, 2, 3, 50).unwrap());
        assert!(c.sample(&lens, 2, 3, 2000).unwrap().iter().all(|&x| x != (2, 3)));
        assert!(NegativeSampler::new(NegativeMode::SameSequence, 0).sample(&[16], 0, 0, 15).is_ok());
    }

    #[test]
    fn windows_are_left_padded_and_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seqs = toy_seqs(&mut rng, 1, 4);
        let mut sampler = NegativeSampler::new(NegativeMode::SameSequence, 0);
        let plan = NceBatch::build(&seqs, &[0], &[], &mut sampler, 3, 2).unwrap();
        // anchors 0,1,2 ; pad row = 4 ; windows time-major [K=3, A=3]
        assert_eq!(plan.windows, vec![4, 4, 0, 4, 0, 1, 0, 1, 2]);
        // anchor 0: k=1..3, anchor 1: k=1..2, anchor 2: k=1
        assert_eq!(plan.terms, vec![0, 1, 2, 3, 4, 6]);
        for (t, chunk) in plan.candidates.chunks(3).enumerate() {
            assert!(chunk[1..].iter().all(|&c| c != chunk[0]), "term {t}");
        }
    }

    #[test]
    fn context_ignores_later_positions() {
        let state = EncoderState::init(&EncoderConfig { k: 3, ..toy_config() }, 5).unwrap();
        let a = vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.5, -0.2, 0.0, 1.0]];
        let h1 = state.build_context(&a).unwrap();
        assert_eq!(h1.len(), 4);
        // the padded one-vector window equals the explicit zero-padded window
        let short = state.build_context(&a[1..]).unwrap();
        let explicit = state.build_context(&[vec![0.0; 4], vec![0.0; 4], a[1].clone()]).unwrap();
        assert_eq!(short, explicit);
        assert!(state.build_context(&[]).is_err());
    }

    #[test]
    fn encode_matches_embed_then_quantize() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = EncoderState::init(&toy_config(), 3).unwrap();
        let book = Codebook::new(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(), 0.25).unwrap();
        state.set_codebook(&book).unwrap();
        for _ in 0..20 {
            let x: Vec<usize> = (0..8).map(|_| rng.gen_range(0..8)).collect();
            let z = state.embed_subsequence(&x).unwrap();
            assert_eq!(z.len(), 2);
            assert_eq!(state.embed_subsequence(&x).unwrap(), z);
            let a = state.encode(&x).unwrap();
            assert_eq!(a.index, crate::quantizer::quantize(&z, &book).unwrap().index);
        }
        assert!(state.embed_subsequence(&[9; 8]).is_err());
    }

    #[test]
    fn full_loss_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = toy_config();
        let mut state = EncoderState::init(&config, 11).unwrap();
        let seqs = toy_seqs(&mut rng, 2, 3);
        for id in state.params.ids().collect::<Vec<_>>() {
            let t = state.params.get(id);
            let fresh = Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.5f32..0.5));
            state.params.set(id, fresh);
        }
        let store = state.params.cast::<f64>();
        let mut sampler = NegativeSampler::new(NegativeMode::SameSequence, 1);
        let plan = NceBatch::build(&seqs, &[0, 1], &[], &mut sampler, config.k, config.negatives).unwrap();
        let (z0, assignments) = {
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            let parts = state.model.loss(&p, &Ctx::eval(), &plan, Bottleneck::Quantize).unwrap();
            ((*parts.z.value()).clone(), parts.assignments)
        };
        let centroids = store.get(state.model.codebook).clone();
        let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
        let report = gradcheck(
            |_, v| {
                let p = Bound::from_vars(v.to_vec());
                let parts = state
                    .model
                    .loss(&p, &Ctx::eval(), &plan, Bottleneck::Frozen { z: &z0, centroids: &centroids, assignments: &assignments })
                    .unwrap();
                parts.nce.add(parts.vq)
            },
            &inputs,
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let state = EncoderState::init(&toy_config(), 9).unwrap();
        let back = EncoderState::from_bytes(&state.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), state.to_bytes());
    }

    #[test]
    fn short_training_run_descends_and_is_deterministic() {
        let corpus = synthesize_corpus(&SynthConfig { pieces: 12, length_beats: 16, ..SynthConfig::default() }).unwrap();
        let config = EncoderConfig {
            recurrent_hidden: 16,
            projection_hidden: 16,
            context_hidden: 16,
            recurrent_layers: 1,
            context_layers: 1,
            batch_pieces: 4,
            epochs: 2,
            dropout: 0.0,
            learning_rate: 3e-3,
            ..EncoderConfig::default()
        };
        let run = train_encoder(&corpus, &config, 5, |_| {}).unwrap();
        let ln_n = 16f64.ln();
        assert!((run.metrics[0].nce - ln_n).abs() < 1e-5);
        assert!(run.metrics[2].nce <= run.metrics[0].nce);
        let again = train_encoder(&corpus, &config, 5, |_| {}).unwrap();
        assert_eq!(run.state.to_bytes(), again.state.to_bytes());
        let codes = encode_corpus(&run.state, &corpus).unwrap();
        assert!(codes.iter().all(|c| c.len() == 16 && c.iter().all(|&x| x < 16)));
    }
}
