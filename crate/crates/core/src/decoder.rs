//! Code-conditioned token decoder.
//!
//! Codes pass through a stack of anticausal relative self-attention blocks,
//! so memory vector `i` summarizes codes `i..L`. Tokens are modelled by a
//! two-stream causal transformer. The content stream sees tokens only. The
//! query stream at each position reads the content stream causally and,
//! through diagonal cross-attention, the memory vector of the subsequence
//! it predicts. Both streams share every weight except the cross-attention.
//!
//! The input stream is four start tokens followed by the sequence shifted
//! right, so stream position `s` predicts token `s − 3`. The logits for
//! token `j` of subsequence `i` therefore depend on earlier tokens and on
//! codes `c_i, …, c_{L−1}` only.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{build_mask, AttentionMask, MaskKind, MultiHeadAttention, RelativeTable, TransformerBlock};
use crate::checkpoint::{digest, Container, DECODER_MAGIC};
use crate::config::{parse_flat, FlatConfig};
use crate::corpus::{Corpus, PAD_INDEX, START_INDEX, VOICES};
use crate::cpc::CodeEncoder;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Embedding, LayerNorm, Linear};
use crate::numerics::{Adam, AdamConfig, Bound, Graph, ParamStore, Scalar, Tensor, Var};

/// What the decoder is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Code indices, embedded afresh.
    Codes,
    /// Unquantized encoder outputs `z`.
    Continuous,
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conditioning::Codes => "codes",
            Conditioning::Continuous => "continuous",
        })
    }
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "codes" => Ok(Conditioning::Codes),
            "continuous" => Ok(Conditioning::Continuous),
            _ => Err(Error::invalid(format!("unknown conditioning {s:?}"))),
        }
    }
}

/// Conditioning of one sequence: one entry per subsequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Codes(Vec<usize>),
    Vectors(Vec<Vec<f64>>),
}

impl Condition {
    pub fn len(&self) -> usize {
        match self {
            Condition::Codes(c) => c.len(),
            Condition::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries `range` of this condition.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Condition {
        match self {
            Condition::Codes(c) => Condition::Codes(c[range].to_vec()),
            Condition::Vectors(v) => Condition::Vectors(v[range].to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Filled from the corpus when zero.
    pub vocab_size: usize,
    /// Filled from the encoder when zero.
    pub codebook_size: usize,
    /// Filled from the encoder when zero; read only for continuous input.
    pub z_dim: usize,
    pub conditioning: Conditioning,
    pub token_embedding_dim: usize,
    pub code_embedding_dim: usize,
    /// Width of each of the voice and subdivision tables.
    pub positional_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub feedforward_dim: usize,
    pub dropout: f64,
    pub sequence_tokens: usize,
    pub subsequence_tokens: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub batch_pieces: usize,
    pub epochs: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            codebook_size: 0,
            z_dim: 0,
            conditioning: Conditioning::Codes,
            token_embedding_dim: 32,
            code_embedding_dim: 32,
            positional_dim: 8,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 8,
            head_dim: 64,
            feedforward_dim: 1028,
            dropout: 0.1,
            sequence_tokens: 384,
            subsequence_tokens: 16,
            learning_rate: 1e-4,
            clip_norm: 0.0,
            batch_pieces: 8,
            epochs: 20,
        }
    }
}

crate::flat_config!(DecoderConfig {
    vocab_size,
    codebook_size,
    z_dim,
    conditioning,
    token_embedding_dim,
    code_embedding_dim,
    positional_dim,
    encoder_layers,
    decoder_layers,
    heads,
    head_dim,
    feedforward_dim,
    dropout,
    sequence_tokens,
    subsequence_tokens,
    learning_rate,
    clip_norm,
    batch_pieces,
    epochs,
});

impl DecoderConfig {
    /// Sizes that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            head_dim: 16,
            feedforward_dim: 128,
            dropout: 0.1,
            learning_rate: 1e-3,
            clip_norm: 1.0,
            batch_pieces: 4,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Largest number of codes in one sequence.
    pub fn max_codes(&self) -> usize {
        self.sequence_tokens / self.subsequence_tokens
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.codebook_size,
            self.token_embedding_dim,
            self.code_embedding_dim,
            self.positional_dim,
            self.encoder_layers,
            self.decoder_layers,
            self.heads,
            self.head_dim,
            self.feedforward_dim,
            self.batch_pieces,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("decoder sizes and batch size must be positive"));
        }
        if self.conditioning == Conditioning::Continuous && self.z_dim == 0 {
            return Err(Error::invalid("continuous conditioning needs z_dim"));
        }
        let l = self.subsequence_tokens;
        if l == 0 || !l.is_multiple_of(VOICES) {
            return Err(Error::invalid("subsequence_tokens must be a positive multiple of 4"));
        }
        if self.sequence_tokens == 0 || !self.sequence_tokens.is_multiple_of(l) {
            return Err(Error::invalid(format!(
                "sequence_tokens {} must be a positive multiple of subsequence_tokens {l}",
                self.sequence_tokens
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.learning_rate <= 0.0 {
            return Err(Error::invalid("dropout must lie in [0, 1) and learning_rate be positive"));
        }
        Ok(())
    }
}

/// Token embedding concatenated with voice and subdivision embeddings,
/// mapped to the model width.
#[derive(Clone, Debug)]
pub struct TokenInput {
    pub token: Embedding,
    pub voice: Embedding,
    pub subdivision: Embedding,
    pub linear: Linear,
}

impl TokenInput {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        vocab: usize,
        token_dim: usize,
        positional_dim: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            token: Embedding::new(store, &format!("{name}.token"), vocab, token_dim, rng),
            voice: Embedding::new(store, &format!("{name}.voice"), VOICES, positional_dim, rng),
            subdivision: Embedding::new(store, &format!("{name}.subdivision"), VOICES, positional_dim, rng),
            linear: Linear::new(store, &format!("{name}.linear"), token_dim + 2 * positional_dim, width, true, rng),
        }
    }

    /// `[b, s, width]` for `b` rows of `s = tokens.len() / b` tokens. Column
    /// `j` of row `r` sits at flat position `p = j + offsets[r]`, which
    /// gives voice `p mod 4` and subdivision `(p div 4) mod 4`.
    pub fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, ctx: &Ctx, tokens: &[usize], offsets: &[isize]) -> Var<'g, S> {
        let b = offsets.len();
        let s = tokens.len() / b;
        let pos: Vec<isize> = offsets.iter().flat_map(|&o| (0..s).map(move |j| j as isize + o)).collect();
        let voices: Vec<usize> = pos.iter().map(|q| q.rem_euclid(4) as usize).collect();
        let subdivisions: Vec<usize> = pos.iter().map(|q| q.div_euclid(4).rem_euclid(4) as usize).collect();
        let tok = self.token.forward(p, tokens);
        let input = tok.graph().concat(
            &[tok, self.voice.forward(p, &voices), self.subdivision.forward(p, &subdivisions)],
            1,
        );
        ctx.dropout(self.linear.forward(p, input).reshape(&[b, s, self.linear.output]))
    }
}

/// Parameter layout of the decoder.
#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    token_input: TokenInput,
    code_embed: Option<Embedding>,
    vector_input: Option<Linear>,
    code_input: Linear,
    code_table: RelativeTable,
    code_blocks: Vec<TransformerBlock>,
    code_ln: LayerNorm,
    token_table: RelativeTable,
    blocks: Vec<TransformerBlock>,
    cross_ln: Vec<LayerNorm>,
    cross: Vec<MultiHeadAttention>,
    out_ln: LayerNorm,
    out: Linear,
}

impl DecoderModel {
    pub fn build<S: Scalar>(config: &DecoderConfig, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let w = c.width();
        let (code_embed, vector_input) = match c.conditioning {
            Conditioning::Codes => {
                (Some(Embedding::new(store, "dec.code_embed", c.codebook_size, c.code_embedding_dim, rng)), None)
            }
            Conditioning::Continuous => {
                (None, Some(Linear::new(store, "dec.vector_input", c.z_dim, c.code_embedding_dim, true, rng)))
            }
        };
        let code_input = Linear::new(store, "dec.code_input", c.code_embedding_dim, w, true, rng);
        let code_table =
            RelativeTable::new(store, "dec.codes", MaskKind::Anticausal, c.max_codes(), c.heads, c.head_dim, rng);
        let code_blocks = (0..c.encoder_layers).map(|i| TransformerBlock::new(store, &format!("dec.codes.{i}"), c.width(), c.heads, c.head_dim, c.feedforward_dim, rng)).collect();
        let code_ln = LayerNorm::new(store, "dec.codes.ln", w);
        let token_input =
            TokenInput::new(store, "dec.input", c.vocab_size, c.token_embedding_dim, c.positional_dim, w, rng);
        let token_table = RelativeTable::new(
            store,
            "dec.tokens",
            MaskKind::Causal,
            c.sequence_tokens + VOICES - 1,
            c.heads,
            c.head_dim,
            rng,
        );
        let mut blocks = Vec::new();
        let mut cross_ln = Vec::new();
        let mut cross = Vec::new();
        for i in 0..c.decoder_layers {
            blocks.push(TransformerBlock::new(store, &format!("dec.tokens.{i}"), w, c.heads, c.head_dim, c.feedforward_dim, rng));
            cross_ln.push(LayerNorm::new(store, &format!("dec.tokens.{i}.ln_cross"), w));
            cross.push(MultiHeadAttention::new(store, &format!("dec.tokens.{i}.cross"), w, c.heads, c.head_dim, rng));
        }
        let out_ln = LayerNorm::new(store, "dec.out_ln", w);
        let out = Linear::new(store, "dec.out", w, c.vocab_size, true, rng);
        Ok(Self {
            config: config.clone(),
            token_input,
            code_embed,
            vector_input,
            code_input,
            code_table,
            code_blocks,
            code_ln,
            token_table,
            blocks,
            cross_ln,
            cross,
            out_ln,
            out,
        })
    }

    /// Memory `[B, L, W]` for a batch of equally long conditions.
    pub fn encode_codes<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        ctx: &Ctx,
        graph: &'g Graph<S>,
        conds: &[Condition],
    ) -> Result<Var<'g, S>> {
        let c = &self.config;
        let b = conds.len();
        let l = conds.first().map_or(0, Condition::len);
        if b == 0 || l == 0 {
            return Err(Error::invalid("cannot encode an empty code sequence"));
        }
        if conds.iter().any(|x| x.len() != l) {
            return Err(Error::Shape("code sequences in one batch must have equal length".into()));
        }
        if l > c.max_codes() {
            return Err(Error::invalid(format!("{l} codes exceed the configured maximum of {}", c.max_codes())));
        }
        let emb = match (c.conditioning, &self.code_embed, &self.vector_input) {
            (Conditioning::Codes, Some(embed), _) => {
                let mut flat = Vec::with_capacity(b * l);
                for cond in conds {
                    let Condition::Codes(codes) = cond else {
                        return Err(Error::invalid("decoder expects code indices"));
                    };
                    if let Some(&bad) = codes.iter().find(|&&x| x >= c.codebook_size) {
                        return Err(Error::invalid(format!("code {bad} outside codebook of {}", c.codebook_size)));
                    }
                    flat.extend_from_slice(codes);
                }
                embed.forward(p, &flat)
            }
            (Conditioning::Continuous, _, Some(lin)) => {
                let mut flat = Vec::with_capacity(b * l * c.z_dim);
                for cond in conds {
                    let Condition::Vectors(rows) = cond else {
                        return Err(Error::invalid("decoder expects continuous vectors"));
                    };
                    if rows.iter().any(|r| r.len() != c.z_dim) {
                        return Err(Error::Shape(format!("conditioning vectors must have dimension {}", c.z_dim)));
                    }
                    flat.extend(rows.iter().flatten().copied());
                }
                lin.forward(p, graph.constant(Tensor::from_f64(&[b * l, c.z_dim], &flat)?))
            }
            _ => unreachable!("layout matches conditioning"),
        };
        let mut x = ctx.dropout(self.code_input.forward(p, emb).reshape(&[b, l, c.width()]));
        let table = self.code_table.slice(p.get(self.code_table.id), l)?;
        let mask = build_mask(MaskKind::Anticausal, l);
        for block in &self.code_blocks {
            x = block.forward(p, ctx, x, Some(table), Some(&mask))?;
        }
        Ok(self.code_ln.forward(p, x))
    }

    /// Logits `[B, m + 1, V]` for tokens `0..=m` given equally long
    /// prefixes of `m` tokens and the memory of [`Self::encode_codes`].
    pub fn token_logits<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        ctx: &Ctx,
        prefixes: &[&[usize]],
        memory: Var<'g, S>,
    ) -> Result<Var<'g, S>> {
        let c = &self.config;
        let b = prefixes.len();
        let m = prefixes.first().map_or(0, |x| x.len());
        if b == 0 || prefixes.iter().any(|x| x.len() != m) {
            return Err(Error::Shape("prefixes in one batch must have equal length".into()));
        }
        if m + 1 > c.sequence_tokens {
            return Err(Error::invalid(format!("prefix of {m} tokens exceeds sequence_tokens {}", c.sequence_tokens)));
        }
        let ms = memory.shape();
        if ms.len() != 3 || ms[0] != b || ms[2] != c.width() {
            return Err(Error::Shape(format!("memory {ms:?} for a batch of {b}")));
        }
        let codes = ms[1];
        if prefixes.iter().flat_map(|x| x.iter()).any(|&t| t >= c.vocab_size) {
            return Err(Error::invalid(format!("token outside vocabulary of {}", c.vocab_size)));
        }

        let s = m + VOICES;
        let mut tokens = Vec::with_capacity(b * s);
        for x in prefixes {
            tokens.extend(std::iter::repeat_n(START_INDEX, VOICES));
            tokens.extend_from_slice(x);
        }
        // positions describe the predicted token, p = s − 3
        let offset = -(VOICES as isize - 1);
        let pos: Vec<isize> = (0..s).map(|i| i as isize + offset).collect();
        let x = self.token_input.forward(p, ctx, &tokens, &vec![offset; b]);

        let table = self.token_table.slice(p.get(self.token_table.id), s)?;
        let causal = build_mask(MaskKind::Causal, s);
        let targets: Vec<usize> =
            pos.iter().map(|&q| ((q.max(0) as usize) / c.subsequence_tokens).min(codes - 1)).collect();
        let diagonal = AttentionMask::diagonal_cross(&targets, codes);

        let (mut h, mut g) = (x, x);
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let hn = block.ln_attn.forward(p, h);
            let gn = block.ln_attn.forward(p, g);
            g = g.add(block.attn.forward(p, ctx, gn, hn, Some(table), Some(&causal))?);
            let gc = self.cross_ln[i].forward(p, g);
            g = g.add(self.cross[i].forward(p, ctx, gc, memory, None, Some(&diagonal))?);
            g = block.feed_forward(p, ctx, g);
            if i < last {
                h = h.add(block.attn.forward(p, ctx, hn, hn, Some(table), Some(&causal))?);
                h = block.feed_forward(p, ctx, h);
            }
        }
        let logits = self.out.forward(p, self.out_ln.forward(p, g));
        Ok(logits.narrow(1, VOICES - 1, m + 1))
    }

    /// Mean negative log-likelihood over the real tokens of `batch`.
    pub fn nll<'g, S: Scalar>(&self, p: &Bound<'g, S>, ctx: &Ctx, graph: &'g Graph<S>, batch: &DecoderBatch) -> Result<Var<'g, S>> {
        let memory = self.encode_codes(p, ctx, graph, &batch.conditions)?;
        decoder_nll(self, p, ctx, batch, memory)
    }
}

/// Sequences with their conditions and real (unpadded) lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBatch {
    /// Each `L · l` tokens; positions past `lengths` are padding.
    pub tokens: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub conditions: Vec<Condition>,
}

impl DecoderBatch {
    pub fn real_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Teacher-forced mean per-token NLL; padding positions excluded.
pub fn decoder_nll<'g, S: Scalar>(
    model: &DecoderModel,
    p: &Bound<'g, S>,
    ctx: &Ctx,
    batch: &DecoderBatch,
    memory: Var<'g, S>,
) -> Result<Var<'g, S>> {
    let l = model.config.subsequence_tokens;
    let b = batch.tokens.len();
    if b == 0 || batch.lengths.len() != b || batch.conditions.len() != b {
        return Err(Error::Shape("batch tokens, lengths and conditions must align".into()));
    }
    let t = batch.tokens[0].len();
    for (i, x) in batch.tokens.iter().enumerate() {
        if x.len() != t || t != batch.conditions[i].len() * l || batch.lengths[i] > t {
            return Err(Error::Shape(format!(
                "sequence {i}: {} tokens, {} codes of {l} tokens, length {}",
                x.len(),
                batch.conditions[i].len(),
                batch.lengths[i]
            )));
        }
    }
    let count = batch.real_tokens();
    if count == 0 {
        return Err(Error::invalid("batch has no real tokens"));
    }
    let prefixes: Vec<&[usize]> = batch.tokens.iter().map(|x| &x[..t - 1]).collect();
    let logits = model.token_logits(p, ctx, &prefixes, memory)?;
    let v = model.config.vocab_size;
    let targets: Vec<usize> = batch.tokens.iter().flatten().map(|&x| x.min(v - 1)).collect();
    let weights: Vec<S> = batch
        .lengths
        .iter()
        .flat_map(|&n| (0..t).map(move |j| if j < n { S::one() } else { S::zero() }))
        .collect();
    Ok(logits
        .reshape(&[b * t, v])
        .log_softmax()
        .pick_last(Rc::new(targets))
        .mul_const(Rc::new(weights))
        .sum()
        .scale(S::of(-1.0 / count as f64)))
}

/// Number of real tokens of a padded stream: everything before the
/// trailing run of padding.
pub fn real_length(tokens: &[usize]) -> usize {
    tokens.iter().rposition(|&t| t != PAD_INDEX).map_or(0, |i| i + 1)
}

/// One training or evaluation sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub length: usize,
    pub condition: Condition,
}

/// Conditions `corpus` on `encoder`, cutting long pieces into windows of at
/// most `sequence_tokens`.
pub fn build_examples(corpus: &Corpus, encoder: &dyn CodeEncoder, config: &DecoderConfig) -> Result<Vec<Example>> {
    let l = config.subsequence_tokens;
    if encoder.subsequence_tokens() != l {
        return Err(Error::invalid(format!(
            "encoder uses {}-token subsequences, decoder expects {l}",
            encoder.subsequence_tokens()
        )));
    }
    let per = config.max_codes();
    let mut out = Vec::new();
    for seq in corpus.sequences(l)? {
        let condition = match config.conditioning {
            Conditioning::Codes => Condition::Codes(encoder.encode_sequence(&seq)?),
            Conditioning::Continuous => Condition::Vectors(encoder.embed_sequence(&seq)?),
        };
        let codes = seq.len();
        let mut start = 0;
        while start < codes {
            let end = (start + per).min(codes);
            let tokens = seq.tokens()[start * l..end * l].to_vec();
            let length = real_length(&tokens);
            if length > 0 {
                out.push(Example { tokens, length, condition: condition.slice(start..end) });
            }
            start = end;
        }
    }
    Ok(out)
}

/// Batches of at most `size` examples with equal code counts.
pub fn batches(examples: &[Example], size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<DecoderBatch> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    let mut rng = rng;
    if let Some(r) = rng.as_deref_mut() {
        idx.shuffle(r);
    }
    idx.sort_by_key(|&i| examples[i].condition.len());
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if g.len() < size && examples[g[0]].condition.len() == examples[i].condition.len() => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    if let Some(r) = rng {
        groups.shuffle(r);
    }
    groups
        .into_iter()
        .map(|g| DecoderBatch {
            tokens: g.iter().map(|&i| examples[i].tokens.clone()).collect(),
            lengths: g.iter().map(|&i| examples[i].length).collect(),
            conditions: g.iter().map(|&i| examples[i].condition.clone()).collect(),
        })
        .collect()
}

/// Per-epoch training log line.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderMetrics {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_nll: f64,
}

/// Trained decoder: layout, weights and provenance.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub model: DecoderModel,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam>,
    pub seed: u64,
    pub epoch: usize,
    /// Digest of the encoder checkpoint the decoder was trained against.
    pub encoder_digest: String,
}

impl DecoderState {
    pub fn init(config: &DecoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let model = DecoderModel::build(config, &mut params, &mut rng)?;
        Ok(Self { model, params, optimizer: None, seed, epoch: 0, encoder_digest: String::new() })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.model.config
    }

    /// Memory `[1, L, W]` of one condition, computed without a tape.
    pub fn memory(&self, cond: &Condition) -> Result<Tensor<f32>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let m = self.model.encode_codes(&p, &Ctx::eval(), &g, std::slice::from_ref(cond))?;
        let out = (*m.value()).clone();
        Ok(out)
    }

    /// Logits for the token following `prefix`.
    pub fn next_logits(&self, prefix: &[usize], memory: &Tensor<f32>) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let logits = self.model.token_logits(&p, &Ctx::eval(), &[prefix], g.constant(memory.clone()))?;
        let v = self.config().vocab_size;
        let all = logits.value();
        Ok(all.data()[prefix.len() * v..].iter().map(|&x| x as f64).collect())
    }

    /// Mean per-token NLL over `examples`.
    pub fn evaluate(&self, examples: &[Example]) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for batch in batches(examples, self.config().batch_pieces, None) {
            let g = Graph::new();
            let p = self.params.bind_frozen(&g);
            let n = batch.real_tokens();
            total += self.model.nll(&p, &Ctx::eval(), &g, &batch)?.item() as f64 * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(Error::invalid("no tokens to evaluate"));
        }
        Ok(total / count as f64)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(DECODER_MAGIC);
        c.put_text("config", self.config().to_text());
        c.put_text("seed", self.seed.to_string());
        c.put_text("epoch", self.epoch.to_string());
        c.put_text("encoder_digest", self.encoder_digest.clone());
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
        let c = Container::from_bytes(bytes, DECODER_MAGIC)?;
        let mut config = DecoderConfig::default();
        config.apply(&parse_flat(c.text("config")?)?)?;
        let mut state = Self::init(&config, c.parsed("seed")?)?;
        state.epoch = c.parsed("epoch")?;
        state.encoder_digest = c.text("encoder_digest")?.to_string();
        c.load_store("param", &mut state.params)?;
        if c.text("adam.step").is_ok() {
            let mut adam = Adam::new(AdamConfig::default(), &state.params);
            c.load_adam("adam", &mut adam, &state.params)?;
            state.optimizer = Some(adam);
        }
        Ok(state)
    }

    /// Whether `encoder` is the one this decoder was trained against.
    pub fn matches_encoder(&self, encoder: &dyn CodeEncoder) -> bool {
        self.encoder_digest == digest(&encoder.checkpoint_bytes())
    }
}

/// Result of [`train_decoder`].
pub struct DecoderRun {
    pub state: DecoderState,
    pub metrics: Vec<DecoderMetrics>,
}

/// Fills the sizes a decoder config takes from its corpus and encoder.
pub fn resolve_config(config: &DecoderConfig, corpus: &Corpus, encoder: &dyn CodeEncoder) -> DecoderConfig {
    let mut c = config.clone();
    if c.vocab_size == 0 {
        c.vocab_size = corpus.vocab.len();
    }
    if c.codebook_size == 0 {
        c.codebook_size = encoder.codebook_size();
    }
    if c.z_dim == 0 {
        c.z_dim = encoder.codebook().dim();
    }
    c
}

/// Trains a decoder on `(X, encode(X))` pairs with the encoder frozen.
///
/// `valid` may be empty, in which case the validation NLL is NaN.
pub fn train_decoder(
    train: &Corpus,
    valid: &Corpus,
    encoder: &dyn CodeEncoder,
    config: &DecoderConfig,
    seed: u64,
    mut progress: impl FnMut(&DecoderMetrics),
) -> Result<DecoderRun> {
    let config = resolve_config(config, train, encoder);
    config.validate()?;
    if encoder.vocab_size() != config.vocab_size {
        return Err(Error::invalid(format!(
            "encoder vocabulary of {} does not match the corpus ({})",
            encoder.vocab_size(),
            config.vocab_size
        )));
    }
    let examples = build_examples(train, encoder, &config)?;
    if examples.is_empty() {
        return Err(Error::invalid("cannot train on an empty corpus"));
    }
    let held_out = if valid.is_empty() { Vec::new() } else { build_examples(valid, encoder, &config)? };
    let mut state = DecoderState::init(&config, seed)?;
    state.encoder_digest = digest(&encoder.checkpoint_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let mut adam = Adam::new(
        AdamConfig { learning_rate: config.learning_rate, clip_norm: config.clip_norm, ..AdamConfig::default() },
        &state.params,
    );
    let mut metrics = Vec::new();
    for epoch in 1..=config.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for (step, batch) in batches(&examples, config.batch_pieces, Some(&mut rng)).iter().enumerate() {
            let ctx = if config.dropout > 0.0 { Ctx::train(config.dropout, rng.gen()) } else { Ctx::eval() };
            let grads = {
                let g = Graph::new();
                let p = state.params.bind(&g);
                let loss = state.model.nll(&p, &ctx, &g, batch)?;
                let value = loss.item() as f64;
                let grads = p.collect(&g.backward(loss));
                if !value.is_finite() || !grads.is_finite() {
                    state.optimizer = Some(adam.clone());
                    state.epoch = epoch - 1;
                    return Err(Error::Diverged { epoch, step, last_good: state.to_bytes() });
                }
                let n = batch.real_tokens();
                total += value * n as f64;
                count += n;
                grads
            };
            adam.update(&mut state.params, &grads);
        }
        state.epoch = epoch;
        let valid_nll = if held_out.is_empty() { f64::NAN } else { state.evaluate(&held_out)? };
        let row = DecoderMetrics { epoch, train_nll: total / count as f64, valid_nll };
        progress(&row);
        metrics.push(row);
    }
    state.optimizer = Some(adam);
    Ok(DecoderRun { state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck, GradcheckOptions};

    pub(crate) fn toy_config() -> DecoderConfig {
        DecoderConfig {
            vocab_size: 8,
            codebook_size: 4,
            z_dim: 2,
            token_embedding_dim: 4,
            code_embedding_dim: 4,
            positional_dim: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            head_dim: 4,
            feedforward_dim: 12,
            dropout: 0.0,
            sequence_tokens: 24,
            subsequence_tokens: 8,
            ..DecoderConfig::default()
        }
    }

    fn randomized(config: &DecoderConfig, seed: u64) -> (DecoderModel, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let model = DecoderModel::build(config, &mut store, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::from_fn(&shape, |_| rng.gen_range(-0.6..0.6)));
        }
        (model, store)
    }

    fn logits_of(model: &DecoderModel, store: &ParamStore<f64>, tokens: &[usize], codes: &[usize]) -> Vec<f64> {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let memory = model.encode_codes(&p, &Ctx::eval(), &g, &[Condition::Codes(codes.to_vec())]).unwrap();
        let prefix = &tokens[..tokens.len() - 1];
        model.token_logits(&p, &Ctx::eval(), &[prefix], memory).unwrap().value().to_f64_vec()
    }

    #[test]
    fn logits_depend_on_past_tokens_and_later_codes_only() {
        let config = toy_config();
        let (model, store) = randomized(&config, 3);
        let (l, n_codes, v) = (config.subsequence_tokens, 3, config.vocab_size);
        let t = l * n_codes;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(3..v)).collect();
            let codes: Vec<usize> = (0..n_codes).map(|_| rng.gen_range(0..4)).collect();
            let base = logits_of(&model, &store, &tokens, &codes);

            let j = rng.gen_range(0..t);
            let mut moved = tokens.clone();
            moved[j] = 3 + (moved[j] - 3 + 1) % (v - 3);
            let after = logits_of(&model, &store, &moved, &codes);
            for pos in 0..=j {
                assert_eq!(base[pos * v..(pos + 1) * v], after[pos * v..(pos + 1) * v], "token {j} leaked into {pos}");
            }
            if j + 1 < t {
                assert_ne!(base[(j + 1) * v..], after[(j + 1) * v..]);
            }

            let m = rng.gen_range(0..n_codes);
            let mut recoded = codes.clone();
            recoded[m] = (recoded[m] + 1) % 4;
            let after = logits_of(&model, &store, &tokens, &recoded);
            for pos in (m + 1) * l..t {
                assert_eq!(base[pos * v..(pos + 1) * v], after[pos * v..(pos + 1) * v], "code {m} leaked into {pos}");
            }
            assert_ne!(base[m * l * v..(m + 1) * l * v], after[m * l * v..(m + 1) * l * v]);
        }
    }

    #[test]
    fn memory_is_anticausal() {
        let config = toy_config();
        let (model, store) = randomized(&config, 4);
        let memory = |codes: &[usize]| {
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            model.encode_codes(&p, &Ctx::eval(), &g, &[Condition::Codes(codes.to_vec())]).unwrap().value().to_f64_vec()
        };
        let w = config.width();
        let a = memory(&[0, 1, 2]);
        let b = memory(&[3, 1, 2]);
        assert_eq!(a[w..], b[w..]);
        assert_ne!(a[..w], b[..w]);
        let c = memory(&[0, 1, 3]);
        assert_ne!(a[..w], c[..w]);
        assert_eq!(a.len(), 3 * w);
    }

    fn toy_batch() -> DecoderBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens: Vec<Vec<usize>> = (0..2).map(|_| (0..24).map(|_| rng.gen_range(3..8)).collect()).collect();
        DecoderBatch {
            tokens,
            lengths: vec![24, 19],
            conditions: vec![Condition::Codes(vec![0, 3, 1]), Condition::Codes(vec![2, 2, 0])],
        }
    }

    #[test]
    fn nll_passes_gradcheck() {
        let config = toy_config();
        let (model, store) = randomized(&config, 6);
        let batch = toy_batch();
        let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
        let report = gradcheck(
            |g, v| model.nll(&Bound::from_vars(v.to_vec()), &Ctx::eval(), g, &batch).unwrap(),
            &inputs,
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn continuous_conditioning_passes_gradcheck() {
        let config = DecoderConfig { conditioning: Conditioning::Continuous, decoder_layers: 1, encoder_layers: 1, ..toy_config() };
        let (model, store) = randomized(&config, 7);
        let mut batch = toy_batch();
        batch.conditions = vec![
            Condition::Vectors(vec![vec![0.1, -0.3], vec![0.5, 0.2], vec![-0.7, 0.0]]),
            Condition::Vectors(vec![vec![0.0, 0.4], vec![0.9, -0.2], vec![0.3, 0.3]]),
        ];
        let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
        let report = gradcheck(
            |g, v| model.nll(&Bound::from_vars(v.to_vec()), &Ctx::eval(), g, &batch).unwrap(),
            &inputs,
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn zero_weights_give_uniform_nll() {
        let config = toy_config();
        let (model, mut store) = randomized(&config, 1);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape));
        }
        let logits = logits_of(&model, &store, &toy_batch().tokens[0], &[0, 1, 2]);
        assert!(logits.iter().all(|&x| x == logits[0]));
        let g = Graph::new();
        let nll = model.nll(&store.bind_frozen(&g), &Ctx::eval(), &g, &toy_batch()).unwrap().item();
        assert!((nll - (8f64).ln()).abs() < 1e-12, "{nll}");
    }

    #[test]
    fn padding_content_is_ignored() {
        let config = toy_config();
        let (model, store) = randomized(&config, 2);
        let a = toy_batch();
        let mut b = a.clone();
        for t in &mut b.tokens[1][19..] {
            *t = (*t + 1) % 8;
        }
        let nll = |batch: &DecoderBatch| {
            let g = Graph::new();
            model.nll(&store.bind_frozen(&g), &Ctx::eval(), &g, batch).unwrap().item()
        };
        assert_eq!(nll(&a), nll(&b));
        assert_eq!(real_length(&[5, 6, 0, 0]), 2);
        assert_eq!(real_length(&[0, 0]), 0);
    }

    #[test]
    fn shape_errors() {
        let config = toy_config();
        let (model, store) = randomized(&config, 2);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        assert!(model.encode_codes(&p, &Ctx::eval(), &g, &[Condition::Codes(vec![0, 4])]).is_err());
        assert!(model.encode_codes(&p, &Ctx::eval(), &g, &[Condition::Codes(vec![0; 4])]).is_err());
        let memory = model.encode_codes(&p, &Ctx::eval(), &g, &[Condition::Codes(vec![0, 1, 2])]).unwrap();
        assert!(model.token_logits(&p, &Ctx::eval(), &[&[3; 24]], memory).is_err());
        let mut bad = toy_batch();
        bad.conditions[0] = Condition::Codes(vec![0, 1]);
        assert!(model.nll(&p, &Ctx::eval(), &g, &bad).is_err());
        let mut config = toy_config();
        config.sequence_tokens = 20;
        assert!(config.validate().is_err());
    }

    #[test]
    fn batches_group_equal_code_counts() {
        let ex = |n: usize| Example { tokens: vec![3; n * 8], length: n * 8, condition: Condition::Codes(vec![0; n]) };
        let examples = vec![ex(2), ex(3), ex(2), ex(3), ex(2)];
        let out = batches(&examples, 2, Some(&mut ChaCha8Rng::seed_from_u64(1)));
        assert_eq!(out.iter().map(|b| b.tokens.len()).sum::<usize>(), 5);
        for b in &out {
            assert!(b.conditions.iter().all(|c| c.len() == b.conditions[0].len()));
            assert!(b.tokens.len() <= 2);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_config_text() {
        let mut state = DecoderState::init(&toy_config(), 3).unwrap();
        state.encoder_digest = "abc".into();
        let back = DecoderState::from_bytes(&state.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), state.to_bytes());
        let mut c = DecoderConfig::default();
        assert!(c.apply(&parse_flat(&DecoderConfig::desk().to_text()).unwrap()).unwrap().is_empty());
        assert_eq!(c, DecoderConfig::desk());
        assert_eq!(DecoderConfig::default().feedforward_dim, 1028);
    }
}
