//! Variations: encode a template, then sample a new sequence token by token
//! from the decoder, conditioned on the template's codes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::digest;
use crate::corpus::{deinterleave, format_piece, split_subsequences, StructuredSequence, Vocabulary, RESERVED};
use crate::cpc::CodeEncoder;
use crate::decoder::{Condition, Conditioning, DecoderState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { top_p: 0.8, temperature: 0.95, seed: 0 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// `softmax(logits / temperature)`; `−∞` logits get probability zero.
pub fn temper(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("no finite logit".into()));
    }
    let e: Vec<f64> = logits.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// Keeps the smallest set of most probable tokens whose mass reaches
/// `top_p` and renormalizes. Equal probabilities are taken in index order.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Result<Vec<f64>> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::invalid(format!("top_p {top_p} outside (0, 1]")));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("probabilities sum to {sum}, expected 1")));
    }
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for i in order {
        out[i] = probs[i];
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    Ok(out.into_iter().map(|p| p / mass).collect())
}

/// Index drawn from `probs` with one uniform variate.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Samples `L · l` tokens conditioned on `cond`.
pub fn generate(cond: &Condition, decoder: &DecoderState, sampling: &SamplingConfig) -> Result<StructuredSequence> {
    sampling.validate()?;
    let config = decoder.config();
    let l = config.subsequence_tokens;
    let total = cond.len() * l;
    if cond.is_empty() {
        return Err(Error::invalid("cannot generate from an empty code sequence"));
    }
    if total > config.sequence_tokens {
        return Err(Error::invalid(format!(
            "{} codes need {total} tokens, decoder handles {}",
            cond.len(),
            config.sequence_tokens
        )));
    }
    let memory = decoder.memory(cond)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut tokens = Vec::with_capacity(total);
    for _ in 0..total {
        let mut logits = decoder.next_logits(&tokens, &memory)?;
        for x in logits.iter_mut().take(RESERVED.len()) {
            *x = f64::NEG_INFINITY;
        }
        let probs = nucleus_filter(&temper(&logits, sampling.temperature)?, sampling.top_p)?;
        tokens.push(sample_categorical(&probs, &mut rng));
    }
    split_subsequences(&tokens, l)
}

/// The condition `decoder` expects for `template`.
pub fn condition_for(template: &StructuredSequence, encoder: &dyn CodeEncoder, decoder: &DecoderState) -> Result<Condition> {
    if template.subsequence_tokens() != decoder.config().subsequence_tokens {
        return Err(Error::invalid(format!(
            "template cut into {}-token subsequences, decoder expects {}",
            template.subsequence_tokens(),
            decoder.config().subsequence_tokens
        )));
    }
    Ok(match decoder.config().conditioning {
        Conditioning::Codes => Condition::Codes(encoder.encode_sequence(template)?),
        Conditioning::Continuous => Condition::Vectors(encoder.embed_sequence(template)?),
    })
}

/// A generated sequence together with what conditioned it.
#[derive(Clone, Debug, PartialEq)]
pub struct Variation {
    pub sequence: StructuredSequence,
    pub condition: Condition,
    /// False when the decoder was trained against a different encoder.
    pub encoder_matches: bool,
}

impl Variation {
    /// The piece line in corpus format.
    pub fn piece_line(&self, vocab: &Vocabulary) -> Result<String> {
        Ok(format_piece(&deinterleave(self.sequence.tokens())?, vocab))
    }

    /// Conditioning codes as space-separated integers; empty for continuous
    /// conditioning.
    pub fn codes_line(&self) -> String {
        match &self.condition {
            Condition::Codes(c) => c.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
            Condition::Vectors(_) => String::new(),
        }
    }
}

/// `generate ∘ encode`: a new sequence with the template's codes.
pub fn vary(
    template: &StructuredSequence,
    encoder: &dyn CodeEncoder,
    decoder: &DecoderState,
    sampling: &SamplingConfig,
) -> Result<Variation> {
    let condition = condition_for(template, encoder, decoder)?;
    let sequence = generate(&condition, decoder, sampling)?;
    let encoder_matches = decoder.encoder_digest == digest(&encoder.checkpoint_bytes());
    Ok(Variation { sequence, condition, encoder_matches })
}
