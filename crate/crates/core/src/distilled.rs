//! Distilled VQ-VAE baseline.
//!
//! A bidirectional teacher learns to predict the central token of a masked
//! span. A VQ-VAE then encodes whole sequences: a relative-attention stack,
//! a 4× downscaling convolution, a second stack and a second 4× downscale
//! give one vector per 16-token subsequence, which is quantized. An
//! auxiliary decoder mirrors this with transposed convolutions, and its
//! token distributions are fitted to the teacher's predictions instead of
//! the input tokens.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{MaskKind, RelativeTable, TransformerBlock};
use crate::checkpoint::{Container, DISTILLED_MAGIC, ENCODER_MAGIC};
use crate::config::{parse_flat, FlatConfig};
use crate::corpus::{Corpus, StructuredSequence, MASK_INDEX, TOKENS_PER_BEAT};
use crate::cpc::{apply_bottleneck, Bottleneck, CodeEncoder, EncoderState};
use crate::decoder::{real_length, TokenInput};
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::numerics::{Adam, AdamConfig, Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::quantizer::{init_codebook, usage_stats, Codebook};

/// Downscale factor of each convolution.
pub const DOWNSCALE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DistilledConfig {
    /// Filled from the corpus when zero.
    pub vocab_size: usize,
    pub sequence_tokens: usize,
    pub token_embedding_dim: usize,
    pub positional_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub feedforward_dim: usize,
    pub dropout: f64,
    pub teacher_layers: usize,
    pub span_tokens: usize,
    /// Tokens of context the teacher sees around each span.
    pub teacher_window: usize,
    /// Masked spans per piece per teacher epoch.
    pub teacher_samples: usize,
    pub teacher_epochs: usize,
    /// Layers in each of the two encoder stacks.
    pub stack_layers: usize,
    pub z_dim: usize,
    pub codebook_size: usize,
    pub beta: f64,
    /// Teacher predictions precomputed per piece for distillation.
    pub targets_per_piece: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub batch_pieces: usize,
    pub epochs: usize,
}

impl Default for DistilledConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            sequence_tokens: 384,
            token_embedding_dim: 32,
            positional_dim: 8,
            heads: 8,
            head_dim: 64,
            feedforward_dim: 1028,
            dropout: 0.1,
            teacher_layers: 8,
            span_tokens: 128,
            teacher_window: 384,
            teacher_samples: 8,
            teacher_epochs: 20,
            stack_layers: 4,
            z_dim: 3,
            codebook_size: 16,
            beta: 0.25,
            targets_per_piece: 32,
            learning_rate: 1e-4,
            clip_norm: 0.0,
            batch_pieces: 8,
            epochs: 20,
        }
    }
}

crate::flat_config!(DistilledConfig {
    vocab_size,
    sequence_tokens,
    token_embedding_dim,
    positional_dim,
    heads,
    head_dim,
    feedforward_dim,
    dropout,
    teacher_layers,
    span_tokens,
    teacher_window,
    teacher_samples,
    teacher_epochs,
    stack_layers,
    z_dim,
    codebook_size,
    beta,
    targets_per_piece,
    learning_rate,
    clip_norm,
    batch_pieces,
    epochs,
});

impl DistilledConfig {
    /// Sizes that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            heads: 4,
            head_dim: 16,
            feedforward_dim: 128,
            dropout: 0.0,
            teacher_layers: 2,
            span_tokens: 32,
            teacher_window: 96,
            teacher_epochs: 3,
            stack_layers: 1,
            learning_rate: 1e-3,
            clip_norm: 1.0,
            epochs: 4,
            ..Self::default()
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.token_embedding_dim,
            self.positional_dim,
            self.heads,
            self.head_dim,
            self.feedforward_dim,
            self.teacher_layers,
            self.teacher_samples,
            self.stack_layers,
            self.z_dim,
            self.targets_per_piece,
            self.batch_pieces,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("distilled sizes and batch size must be positive"));
        }
        if self.codebook_size < 2 {
            return Err(Error::invalid("codebook_size must be at least 2"));
        }
        if self.sequence_tokens == 0 || !self.sequence_tokens.is_multiple_of(TOKENS_PER_BEAT) {
            return Err(Error::invalid(format!("sequence_tokens must be a positive multiple of {TOKENS_PER_BEAT}")));
        }
        if self.span_tokens == 0 || !self.span_tokens.is_multiple_of(TOKENS_PER_BEAT) {
            return Err(Error::invalid(format!("span_tokens must be a positive multiple of {TOKENS_PER_BEAT}")));
        }
        if self.teacher_window < self.span_tokens {
            return Err(Error::invalid("teacher_window must hold the masked span"));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.learning_rate <= 0.0 || self.beta < 0.0 {
            return Err(Error::invalid("dropout must lie in [0, 1), learning_rate > 0, beta >= 0"));
        }
        Ok(())
    }
}

/// `x` with `span` tokens replaced by the mask token, starting at
/// `center − span / 2`, and the original token at `center`.
pub fn mask_span(x: &[usize], center: usize, span: usize) -> Result<(Vec<usize>, usize)> {
    let start = center.checked_sub(span / 2);
    let end = start.map(|s| s + span);
    match (start, end) {
        (Some(start), Some(end)) if span > 0 && end <= x.len() => {
            let mut out = x.to_vec();
            out[start..end].iter_mut().for_each(|t| *t = MASK_INDEX);
            Ok((out, x[center]))
        }
        _ => Err(Error::invalid(format!("span of {span} around {center} leaves a sequence of {}", x.len()))),
    }
}

/// A masked window around one span, ready for the teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherQuery {
    pub tokens: Vec<usize>,
    /// Flat position of `tokens[0]` in its piece.
    pub offset: usize,
    /// Index of the span centre within `tokens`.
    pub center: usize,
    pub target: usize,
}

/// The teacher's view of `piece[..len]` with the span centred at `center`
/// masked: at most `window` tokens around it.
pub fn teacher_query(piece: &[usize], center: usize, span: usize, window: usize) -> Result<TeacherQuery> {
    let (masked, target) = mask_span(piece, center, span)?;
    let n = piece.len();
    let w = window.min(n);
    let start = center.saturating_sub(w / 2).min(n - w);
    Ok(TeacherQuery { tokens: masked[start..start + w].to_vec(), offset: start, center: center - start, target })
}

/// Centres whose span fits inside `n` tokens.
fn center_range(n: usize, span: usize) -> Option<std::ops::RangeInclusive<usize>> {
    (n >= span).then(|| span / 2..=n - span + span / 2)
}

/// Bidirectional relative transformer over masked windows.
#[derive(Clone, Debug)]
pub struct TeacherModel {
    pub config: DistilledConfig,
    input: TokenInput,
    table: RelativeTable,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    out: Linear,
}

impl TeacherModel {
    pub fn build<S: Scalar>(config: &DistilledConfig, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let w = c.width();
        let input = TokenInput::new(store, "teacher.input", c.vocab_size, c.token_embedding_dim, c.positional_dim, w, rng);
        let table = RelativeTable::new(store, "teacher", MaskKind::Bidirectional, c.teacher_window, c.heads, c.head_dim, rng);
        let blocks = (0..c.teacher_layers)
            .map(|i| TransformerBlock::new(store, &format!("teacher.{i}"), w, c.heads, c.head_dim, c.feedforward_dim, rng))
            .collect();
        let ln = LayerNorm::new(store, "teacher.ln", w);
        // zero output layer: the initial prediction is uniform
        let out = Linear::zeros(store, "teacher.out", w, c.vocab_size, true);
        Ok(Self { config: config.clone(), input, table, blocks, ln, out })
    }

    /// Logits `[B, V]` at the span centres of equally long queries.
    pub fn logits<'g, S: Scalar>(&self, p: &Bound<'g, S>, ctx: &Ctx, queries: &[&TeacherQuery]) -> Result<Var<'g, S>> {
        let b = queries.len();
        let s = queries.first().map_or(0, |q| q.tokens.len());
        if b == 0 || s == 0 || queries.iter().any(|q| q.tokens.len() != s) {
            return Err(Error::Shape("teacher queries in one batch must have equal length".into()));
        }
        let tokens: Vec<usize> = queries.iter().flat_map(|q| q.tokens.iter().copied()).collect();
        if tokens.iter().any(|&t| t >= self.config.vocab_size) {
            return Err(Error::invalid("token outside the teacher vocabulary"));
        }
        let offsets: Vec<isize> = queries.iter().map(|q| q.offset as isize).collect();
        let mut x = self.input.forward(p, ctx, &tokens, &offsets);
        let table = self.table.slice(p.get(self.table.id), s)?;
        for block in &self.blocks {
            x = block.forward(p, ctx, x, Some(table), None)?;
        }
        let rows: Vec<usize> = queries.iter().enumerate().map(|(i, q)| i * s + q.center).collect();
        let h = x.reshape(&[b * s, self.config.width()]).gather_rows(Rc::new(rows));
        Ok(self.out.forward(p, self.ln.forward(p, h)))
    }

    pub fn loss<'g, S: Scalar>(&self, p: &Bound<'g, S>, ctx: &Ctx, queries: &[&TeacherQuery]) -> Result<Var<'g, S>> {
        let targets: Vec<usize> = queries.iter().map(|q| q.target).collect();
        Ok(self.logits(p, ctx, queries)?.log_softmax().pick_last(Rc::new(targets)).mean().scale(S::of(-1.0)))
    }
}

#[derive(Clone, Debug)]
pub struct TeacherState {
    pub model: TeacherModel,
    pub params: ParamStore<f32>,
}

impl TeacherState {
    pub fn init(config: &DistilledConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let model = TeacherModel::build(config, &mut params, &mut rng)?;
        Ok(Self { model, params })
    }

    /// Predictive distributions at the centres of `queries`.
    pub fn predict(&self, queries: &[&TeacherQuery]) -> Result<Vec<Vec<f32>>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let probs = self.model.logits(&p, &Ctx::eval(), queries)?.softmax().value();
        Ok(probs.data().chunks(self.model.config.vocab_size).map(<[f32]>::to_vec).collect())
    }

    fn mean_loss(&self, groups: &[Vec<TeacherQuery>]) -> Result<f64> {
        let (mut total, mut n) = (0.0, 0usize);
        for group in groups {
            for chunk in group.chunks(self.model.config.batch_pieces.max(1) * 4) {
                let refs: Vec<&TeacherQuery> = chunk.iter().collect();
                let g = Graph::new();
                let p = self.params.bind_frozen(&g);
                total += self.model.loss(&p, &Ctx::eval(), &refs)?.item() as f64 * refs.len() as f64;
                n += refs.len();
            }
        }
        Ok(total / n.max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherMetrics {
    pub epoch: usize,
    pub loss: f64,
}

pub struct TeacherRun {
    pub teacher: TeacherState,
    /// Row 0 is measured at initialization.
    pub metrics: Vec<TeacherMetrics>,
}

/// Real token streams of every piece.
fn piece_streams(corpus: &Corpus) -> Vec<Vec<usize>> {
    corpus.pieces.iter().map(|p| p.interleave()).collect()
}

/// `count` random queries per piece, grouped by window length.
fn draw_queries(streams: &[Vec<usize>], config: &DistilledConfig, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<TeacherQuery>>> {
    let mut groups: Vec<Vec<TeacherQuery>> = Vec::new();
    for s in streams {
        let Some(range) = center_range(s.len(), config.span_tokens) else { continue };
        for _ in 0..count {
            let q = teacher_query(s, rng.gen_range(range.clone()), config.span_tokens, config.teacher_window)?;
            match groups.iter_mut().find(|g| g[0].tokens.len() == q.tokens.len()) {
                Some(g) => g.push(q),
                None => groups.push(vec![q]),
            }
        }
    }
    Ok(groups)
}

/// Trains the teacher to predict the centre of masked spans.
pub fn train_teacher(
    corpus: &Corpus,
    config: &DistilledConfig,
    seed: u64,
    mut progress: impl FnMut(&TeacherMetrics),
) -> Result<TeacherRun> {
    let mut config = config.clone();
    if config.vocab_size == 0 {
        config.vocab_size = corpus.vocab.len();
    }
    if config.vocab_size != corpus.vocab.len() {
        return Err(Error::invalid(format!(
            "vocab_size {} differs from the corpus vocabulary of {}",
            config.vocab_size,
            corpus.vocab.len()
        )));
    }
    config.validate()?;
    let streams = piece_streams(corpus);
    let mut teacher = TeacherState::init(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2545_f491_4f6c_dd1d);
    let probe = draw_queries(&streams, &config, 1, &mut ChaCha8Rng::seed_from_u64(seed))?;
    if probe.is_empty() {
        return Err(Error::invalid(format!("no piece holds a masked span of {} tokens", config.span_tokens)));
    }
    let mut adam = Adam::new(
        AdamConfig { learning_rate: config.learning_rate, clip_norm: config.clip_norm, ..AdamConfig::default() },
        &teacher.params,
    );
    let batch = config.batch_pieces * 4;
    let mut metrics = vec![TeacherMetrics { epoch: 0, loss: teacher.mean_loss(&probe)? }];
    progress(&metrics[0]);
    for epoch in 1..=config.teacher_epochs {
        let mut steps: Vec<Vec<TeacherQuery>> = Vec::new();
        for group in draw_queries(&streams, &config, config.teacher_samples, &mut rng)? {
            let mut group = group;
            group.shuffle(&mut rng);
            steps.extend(group.chunks(batch).map(<[TeacherQuery]>::to_vec));
        }
        steps.shuffle(&mut rng);
        let (mut total, mut n) = (0.0, 0usize);
        for (step, chunk) in steps.iter().enumerate() {
            let refs: Vec<&TeacherQuery> = chunk.iter().collect();
            let ctx = if config.dropout > 0.0 { Ctx::train(config.dropout, rng.gen()) } else { Ctx::eval() };
            let g = Graph::new();
            let p = teacher.params.bind(&g);
            let loss = teacher.model.loss(&p, &ctx, &refs)?;
            let value = loss.item() as f64;
            let grads = p.collect(&g.backward(loss));
            if !value.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, step, last_good: teacher_bytes(&teacher) });
            }
            adam.update(&mut teacher.params, &grads);
            total += value * refs.len() as f64;
            n += refs.len();
        }
        let row = TeacherMetrics { epoch, loss: total / n.max(1) as f64 };
        progress(&row);
        metrics.push(row);
    }
    Ok(TeacherRun { teacher, metrics })
}

fn teacher_bytes(t: &TeacherState) -> Vec<u8> {
    let mut c = Container::new(DISTILLED_MAGIC);
    c.put_text("config", t.model.config.to_text());
    c.put_store("teacher", &t.params);
    c.to_bytes()
}

/// VQ-VAE whose auxiliary decoder is trained against the teacher.
#[derive(Clone, Debug)]
pub struct DistilledModel {
    pub config: DistilledConfig,
    input: TokenInput,
    tables: [RelativeTable; 4],
    enc_full: Vec<TransformerBlock>,
    down1: Linear,
    enc_quarter: Vec<TransformerBlock>,
    down2: Linear,
    to_z: Linear,
    pub codebook: ParamId,
    from_z: Linear,
    up1: Linear,
    dec_quarter: Vec<TransformerBlock>,
    up2: Linear,
    dec_full: Vec<TransformerBlock>,
    out_ln: LayerNorm,
    out: Linear,
}

/// Sequences of equal length with the teacher targets that supervise them.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillBatch {
    /// Each a multiple of 16 tokens long.
    pub tokens: Vec<Vec<usize>>,
    /// `(row, position)` of each target.
    pub positions: Vec<(usize, usize)>,
    /// Teacher distribution of each target.
    pub targets: Vec<Vec<f32>>,
}

/// Terms of the distillation objective.
pub struct DistilledLoss<'g, S: Scalar> {
    pub distill: Var<'g, S>,
    pub vq: Var<'g, S>,
    pub z: Var<'g, S>,
    pub assignments: Vec<usize>,
}

impl DistilledModel {
    pub fn build<S: Scalar>(config: &DistilledConfig, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let w = c.width();
        let t = c.sequence_tokens;
        let stack = |store: &mut ParamStore<S>, name: &str, rng: &mut ChaCha8Rng| -> Vec<TransformerBlock> {
            (0..c.stack_layers)
                .map(|i| TransformerBlock::new(store, &format!("{name}.{i}"), w, c.heads, c.head_dim, c.feedforward_dim, rng))
                .collect()
        };
        let table = |store: &mut ParamStore<S>, name: &str, len: usize, rng: &mut ChaCha8Rng| {
            RelativeTable::new(store, name, MaskKind::Bidirectional, len, c.heads, c.head_dim, rng)
        };
        let input = TokenInput::new(store, "dst.input", c.vocab_size, c.token_embedding_dim, c.positional_dim, w, rng);
        let tables = [
            table(store, "dst.enc_full", t, rng),
            table(store, "dst.enc_quarter", t / DOWNSCALE, rng),
            table(store, "dst.dec_quarter", t / DOWNSCALE, rng),
            table(store, "dst.dec_full", t, rng),
        ];
        let enc_full = stack(store, "dst.enc_full", rng);
        let down1 = Linear::new(store, "dst.down1", DOWNSCALE * w, w, true, rng);
        let enc_quarter = stack(store, "dst.enc_quarter", rng);
        let down2 = Linear::new(store, "dst.down2", DOWNSCALE * w, w, true, rng);
        let to_z = Linear::new(store, "dst.to_z", w, c.z_dim, true, rng);
        let codebook = store.add("dst.codebook", Tensor::zeros(&[c.codebook_size, c.z_dim]));
        let from_z = Linear::new(store, "dst.from_z", c.z_dim, w, true, rng);
        let up1 = Linear::new(store, "dst.up1", w, DOWNSCALE * w, true, rng);
        let dec_quarter = stack(store, "dst.dec_quarter", rng);
        let up2 = Linear::new(store, "dst.up2", w, DOWNSCALE * w, true, rng);
        let dec_full = stack(store, "dst.dec_full", rng);
        let out_ln = LayerNorm::new(store, "dst.out_ln", w);
        let out = Linear::new(store, "dst.out", w, c.vocab_size, true, rng);
        Ok(Self {
            config: config.clone(),
            input,
            tables,
            enc_full,
            down1,
            enc_quarter,
            down2,
            to_z,
            codebook,
            from_z,
            up1,
            dec_quarter,
            up2,
            dec_full,
            out_ln,
            out,
        })
    }

    fn run_stack<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        ctx: &Ctx,
        blocks: &[TransformerBlock],
        table: &RelativeTable,
        mut x: Var<'g, S>,
    ) -> Result<Var<'g, S>> {
        let t = x.shape()[1];
        let slice = table.slice(p.get(table.id), t)?;
        for block in blocks {
            x = block.forward(p, ctx, x, Some(slice), None)?;
        }
        Ok(x)
    }

    /// `z: [B · L, d_z]` for `b` equally long rows of `16 · L` tokens.
    pub fn embed<'g, S: Scalar>(&self, p: &Bound<'g, S>, ctx: &Ctx, tokens: &[usize], b: usize) -> Result<Var<'g, S>> {
        let w = self.config.width();
        let t = tokens.len() / b.max(1);
        if b == 0 || t == 0 || t * b != tokens.len() || !t.is_multiple_of(TOKENS_PER_BEAT) || t > self.config.sequence_tokens {
            return Err(Error::Shape(format!(
                "{} tokens in {b} rows; rows must be positive multiples of {TOKENS_PER_BEAT} up to {}",
                tokens.len(),
                self.config.sequence_tokens
            )));
        }
        if tokens.iter().any(|&x| x >= self.config.vocab_size) {
            return Err(Error::invalid("token outside the vocabulary"));
        }
        let x = self.input.forward(p, ctx, tokens, &vec![0; b]);
        let x = self.run_stack(p, ctx, &self.enc_full, &self.tables[0], x)?;
        let x = self.down1.forward(p, x.reshape(&[b, t / DOWNSCALE, DOWNSCALE * w])).relu();
        let x = self.run_stack(p, ctx, &self.enc_quarter, &self.tables[1], x)?;
        let l = t / TOKENS_PER_BEAT;
        let x = self.down2.forward(p, x.reshape(&[b, l, DOWNSCALE * w])).relu();
        Ok(self.to_z.forward(p, x.reshape(&[b * l, w])))
    }

    /// Token logits `[B, 16 · L, V]` from `z^q: [B · L, d_z]`.
    pub fn reconstruct<'g, S: Scalar>(&self, p: &Bound<'g, S>, ctx: &Ctx, zq: Var<'g, S>, b: usize) -> Result<Var<'g, S>> {
        let w = self.config.width();
        let l = zq.shape()[0] / b;
        let x = self.from_z.forward(p, zq).relu();
        let x = self.up1.forward(p, x).reshape(&[b, l * DOWNSCALE, w]);
        let x = self.run_stack(p, ctx, &self.dec_quarter, &self.tables[2], x)?;
        let x = self.up2.forward(p, x).reshape(&[b, l * TOKENS_PER_BEAT, w]);
        let x = self.run_stack(p, ctx, &self.dec_full, &self.tables[3], x)?;
        Ok(self.out.forward(p, self.out_ln.forward(p, x)))
    }

    pub fn loss<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        ctx: &Ctx,
        batch: &DistillBatch,
        bottleneck: Bottleneck<'_, S>,
    ) -> Result<DistilledLoss<'g, S>> {
        let b = batch.tokens.len();
        let t = batch.tokens.first().map_or(0, Vec::len);
        if batch.tokens.iter().any(|x| x.len() != t) || batch.positions.len() != batch.targets.len() || batch.targets.is_empty() {
            return Err(Error::Shape("distillation batch rows, positions and targets must align".into()));
        }
        let v = self.config.vocab_size;
        if batch.positions.iter().any(|&(r, j)| r >= b || j >= t) || batch.targets.iter().any(|q| q.len() != v) {
            return Err(Error::Shape("distillation target out of range".into()));
        }
        let tokens: Vec<usize> = batch.tokens.concat();
        let z = self.embed(p, ctx, &tokens, b)?;
        let (zq, vq, assignments) = apply_bottleneck(z, p.get(self.codebook), self.config.beta, bottleneck)?;
        let logits = self.reconstruct(p, ctx, zq, b)?;
        let rows: Vec<usize> = batch.positions.iter().map(|&(r, j)| r * t + j).collect();
        let m = rows.len();
        let soft: Vec<S> = batch.targets.iter().flatten().map(|&q| S::of(q as f64)).collect();
        let distill = logits
            .reshape(&[b * t, v])
            .log_softmax()
            .gather_rows(Rc::new(rows))
            .mul_const(Rc::new(soft))
            .sum()
            .scale(S::of(-1.0 / m as f64));
        Ok(DistilledLoss { distill, vq, z, assignments })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistilledMetrics {
    pub epoch: usize,
    pub distill: f64,
    pub vq: f64,
    pub perplexity: f64,
}

/// Trained distilled encoder.
#[derive(Clone, Debug)]
pub struct DistilledState {
    pub model: DistilledModel,
    pub params: ParamStore<f32>,
    pub seed: u64,
    pub epoch: usize,
}

impl DistilledState {
    pub fn init(config: &DistilledConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let model = DistilledModel::build(config, &mut params, &mut rng)?;
        Ok(Self { model, params, seed, epoch: 0 })
    }

    pub fn config(&self) -> &DistilledConfig {
        &self.model.config
    }

    /// `z` rows of one stream whose length is a multiple of 16, processed in
    /// windows of at most `sequence_tokens`.
    fn embed_stream(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for chunk in tokens.chunks(self.config().sequence_tokens) {
            let g = Graph::new();
            let p = self.params.bind_frozen(&g);
            let z = self.model.embed(&p, &Ctx::eval(), chunk, 1)?.value();
            out.extend(z.data().chunks(self.config().z_dim).map(|r| r.iter().map(|&x| x as f64).collect::<Vec<_>>()));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut c = Container::new(DISTILLED_MAGIC);
        c.put_text("config", self.config().to_text());
        c.put_text("seed", self.seed.to_string());
        c.put_text("epoch", self.epoch.to_string());
        c.put_store("param", &self.params);
        c.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes, DISTILLED_MAGIC)?;
        let mut config = DistilledConfig::default();
        config.apply(&parse_flat(c.text("config")?)?)?;
        let mut state = Self::init(&config, c.parsed("seed")?)?;
        state.epoch = c.parsed("epoch")?;
        c.load_store("param", &mut state.params)?;
        Ok(state)
    }
}

impl CodeEncoder for DistilledState {
    fn subsequence_tokens(&self) -> usize {
        TOKENS_PER_BEAT
    }

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn codebook(&self) -> Codebook {
        Codebook::from_tensor(self.params.get(self.model.codebook), self.config().beta).expect("codebook shape")
    }

    fn embed_sequence(&self, seq: &StructuredSequence) -> Result<Vec<Vec<f64>>> {
        if seq.subsequence_tokens() != TOKENS_PER_BEAT {
            return Err(Error::Shape(format!(
                "sequence cut into {}-token subsequences, distilled encoder expects {TOKENS_PER_BEAT}",
                seq.subsequence_tokens()
            )));
        }
        self.embed_stream(seq.tokens())
    }

    fn checkpoint_bytes(&self) -> Vec<u8> {
        self.to_bytes()
    }
}

/// Reads either encoder checkpoint kind.
pub fn load_code_encoder(bytes: &[u8]) -> Result<Box<dyn CodeEncoder>> {
    if bytes.starts_with(DISTILLED_MAGIC.as_bytes()) {
        Ok(Box::new(DistilledState::from_bytes(bytes)?))
    } else if bytes.starts_with(ENCODER_MAGIC.as_bytes()) {
        Ok(Box::new(EncoderState::from_bytes(bytes)?))
    } else {
        Err(Error::Version("not an encoder checkpoint".into()))
    }
}

/// A window of a piece with the teacher targets inside it.
#[derive(Clone, Debug)]
struct DistillExample {
    tokens: Vec<usize>,
    targets: Vec<(usize, Vec<f32>)>,
}

/// Windows of every piece, each with teacher predictions at random real
/// positions.
fn distill_examples(
    corpus: &Corpus,
    teacher: &TeacherState,
    config: &DistilledConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DistillExample>> {
    let mut out = Vec::new();
    for seq in corpus.sequences(TOKENS_PER_BEAT)? {
        let stream = seq.tokens();
        let n = real_length(stream);
        let Some(range) = center_range(n, config.span_tokens) else { continue };
        let centers: Vec<usize> = (0..config.targets_per_piece).map(|_| rng.gen_range(range.clone())).collect();
        let queries: Vec<TeacherQuery> = centers
            .iter()
            .map(|&c| teacher_query(&stream[..n], c, config.span_tokens, config.teacher_window))
            .collect::<Result<_>>()?;
        // all queries of one piece share the window length
        let probs = teacher.predict(&queries.iter().collect::<Vec<_>>())?;
        for start in (0..stream.len()).step_by(config.sequence_tokens) {
            let end = (start + config.sequence_tokens).min(stream.len());
            let targets: Vec<(usize, Vec<f32>)> = centers
                .iter()
                .zip(&probs)
                .filter(|(&c, _)| c >= start && c < end)
                .map(|(&c, q)| (c - start, q.clone()))
                .collect();
            if !targets.is_empty() {
                out.push(DistillExample { tokens: stream[start..end].to_vec(), targets });
            }
        }
    }
    Ok(out)
}

fn distill_batches(examples: &[DistillExample], size: usize, rng: &mut ChaCha8Rng) -> Vec<DistillBatch> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| examples[i].tokens.len());
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if g.len() < size && examples[g[0]].tokens.len() == examples[i].tokens.len() => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups.shuffle(rng);
    groups
        .into_iter()
        .map(|g| {
            let mut batch = DistillBatch { tokens: Vec::new(), positions: Vec::new(), targets: Vec::new() };
            for (row, &i) in g.iter().enumerate() {
                batch.tokens.push(examples[i].tokens.clone());
                for (j, q) in &examples[i].targets {
                    batch.positions.push((row, *j));
                    batch.targets.push(q.clone());
                }
            }
            batch
        })
        .collect()
}

pub struct DistilledRun {
    pub state: DistilledState,
    pub metrics: Vec<DistilledMetrics>,
}

/// Fits the VQ-VAE to the frozen teacher's predictions.
pub fn train_distilled_encoder(
    corpus: &Corpus,
    teacher: &TeacherState,
    seed: u64,
    mut progress: impl FnMut(&DistilledMetrics),
) -> Result<DistilledRun> {
    let config = teacher.model.config.clone();
    if config.vocab_size != corpus.vocab.len() {
        return Err(Error::invalid("teacher and corpus vocabularies differ"));
    }
    let mut state = DistilledState::init(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x94d0_49bb_1331_11eb);
    let examples = distill_examples(corpus, teacher, &config, &mut rng)?;
    if examples.is_empty() {
        return Err(Error::invalid("no piece is long enough to distill"));
    }

    // codebook from C random encoder outputs
    let mut samples = Vec::new();
    for ex in examples.iter().take(config.codebook_size.max(8)) {
        samples.extend(state.embed_stream(&ex.tokens)?);
    }
    samples.shuffle(&mut rng);
    let book = init_codebook(&samples, config.codebook_size, config.beta, rng.gen())?;
    state.params.set(state.model.codebook, book.to_tensor());

    let mut adam = Adam::new(
        AdamConfig { learning_rate: config.learning_rate, clip_norm: config.clip_norm, ..AdamConfig::default() },
        &state.params,
    );
    let mut metrics = Vec::new();
    for epoch in 1..=config.epochs {
        let (mut distill, mut vq, mut codes, mut steps) = (0.0, 0.0, Vec::new(), 0.0);
        for (step, batch) in distill_batches(&examples, config.batch_pieces, &mut rng).iter().enumerate() {
            let ctx = if config.dropout > 0.0 { Ctx::train(config.dropout, rng.gen()) } else { Ctx::eval() };
            let g = Graph::new();
            let p = state.params.bind(&g);
            let parts = state.model.loss(&p, &ctx, batch, Bottleneck::Quantize)?;
            let total = parts.distill.add(parts.vq);
            let value = total.item() as f64;
            let grads = p.collect(&g.backward(total));
            if !value.is_finite() || !grads.is_finite() {
                state.epoch = epoch - 1;
                return Err(Error::Diverged { epoch, step, last_good: state.to_bytes() });
            }
            distill += parts.distill.item() as f64;
            vq += parts.vq.item() as f64;
            codes.extend_from_slice(&parts.assignments);
            steps += 1.0;
            adam.update(&mut state.params, &grads);
        }
        state.epoch = epoch;
        let row = DistilledMetrics {
            epoch,
            distill: distill / steps,
            vq: vq / steps,
            perplexity: usage_stats(&codes, config.codebook_size)?.perplexity,
        };
        progress(&row);
        metrics.push(row);
    }
    Ok(DistilledRun { state, metrics })
}
