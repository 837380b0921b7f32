//! Structured token sequences: four interleaved voices at four ticks per
//! beat, cut into fixed-length subsequences.
//!
//! The on-disk corpus format is UTF-8 text:
//!
//! ```text
//! #version 1
//! #ticks_per_beat 4
//! #vocab <pad> <s> <mask> __ rest 60 61 ...
//! 60 __ 62 __ | 55 __ __ __ | 48 __ 50 __ | 40 __ __ __
//! ```
//!
//! One piece per line, four `|`-separated voices of space-separated tokens.
//! Synthetic corpora carry a sibling `.labels` file with one line of
//! space-separated family indices (one per beat) per piece.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const VOICES: usize = 4;
pub const TICKS_PER_BEAT: usize = 4;
/// Tokens in one beat of the interleaved stream.
pub const TOKENS_PER_BEAT: usize = VOICES * TICKS_PER_BEAT;

pub const PAD: &str = "<pad>";
pub const START: &str = "<s>";
pub const MASK: &str = "<mask>";
pub const HOLD: &str = "__";
pub const REST: &str = "rest";

pub const PAD_INDEX: usize = 0;
pub const START_INDEX: usize = 1;
pub const MASK_INDEX: usize = 2;
pub const RESERVED: [&str; 3] = [PAD, START, MASK];

/// Bijection between token strings and indices.
///
/// Indices 0, 1 and 2 are always `<pad>`, `<s>` and `<mask>`. Tokens that
/// parse as integers are MIDI pitches and move under transposition; all
/// others (hold, rest, reserved) are invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    pitch: Vec<Option<i32>>,
    by_pitch: HashMap<i32, usize>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if symbols.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::invalid(format!("vocabulary must start with {RESERVED:?}")));
            }
        }
        let mut index = HashMap::with_capacity(symbols.len());
        let mut pitch = Vec::with_capacity(symbols.len());
        let mut by_pitch = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) || s.contains('|') {
                return Err(Error::invalid(format!("bad vocabulary symbol {s:?}")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary symbol {s:?}")));
            }
            let p = s.parse::<i32>().ok();
            if let Some(p) = p {
                by_pitch.insert(p, i);
            }
            pitch.push(p);
        }
        Ok(Self { symbols, index, pitch, by_pitch })
    }

    /// Reserved tokens, hold, rest and every pitch in `lo..=hi`.
    pub fn with_pitch_range(lo: i32, hi: i32) -> Self {
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.push(HOLD.into());
        symbols.push(REST.into());
        symbols.extend((lo..=hi).map(|p| p.to_string()));
        Self::new(symbols).expect("standard vocabulary is valid")
    }

    pub fn reserved_only() -> Self {
        Self::new(RESERVED.iter().map(|s| s.to_string()).collect()).expect("reserved vocabulary")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }

    pub fn pitch_of(&self, index: usize) -> Option<i32> {
        self.pitch.get(index).copied().flatten()
    }

    pub fn index_of_pitch(&self, pitch: i32) -> Option<usize> {
        self.by_pitch.get(&pitch).copied()
    }

    /// `<pad>`, `<s>` and `<mask>`: never part of a piece's musical content.
    pub fn is_reserved(&self, index: usize) -> bool {
        index < RESERVED.len()
    }

    /// Adds every missing pitch in `lo..=hi`.
    pub fn extend_pitch_range(&mut self, lo: i32, hi: i32) {
        let mut symbols = self.symbols.clone();
        for p in lo..=hi {
            if self.index_of_pitch(p).is_none() {
                symbols.push(p.to_string());
            }
        }
        *self = Self::new(symbols).expect("extended vocabulary");
    }
}

/// Four equal-length voices of token indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoicedPiece {
    voices: [Vec<usize>; VOICES],
}

impl VoicedPiece {
    pub fn new(voices: [Vec<usize>; VOICES]) -> Result<Self> {
        let n = voices[0].len();
        if voices.iter().any(|v| v.len() != n) {
            return Err(Error::invalid(format!(
                "voices have unequal lengths {:?}",
                voices.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        Ok(Self { voices })
    }

    pub fn voices(&self) -> &[Vec<usize>; VOICES] {
        &self.voices
    }

    pub fn steps(&self) -> usize {
        self.voices[0].len()
    }

    pub fn interleave(&self) -> Vec<usize> {
        interleave(&self.voices).expect("voices checked at construction")
    }
}

/// `out[4t + v] = voices[v][t]`.
pub fn interleave(voices: &[Vec<usize>]) -> Result<Vec<usize>> {
    if voices.len() != VOICES {
        return Err(Error::invalid(format!("expected {VOICES} voices, got {}", voices.len())));
    }
    let steps = voices[0].len();
    if voices.iter().any(|v| v.len() != steps) {
        return Err(Error::invalid("voices have unequal lengths"));
    }
    let mut out = Vec::with_capacity(steps * VOICES);
    for t in 0..steps {
        out.extend(voices.iter().map(|v| v[t]));
    }
    Ok(out)
}

/// Inverse of [`interleave`].
pub fn deinterleave(flat: &[usize]) -> Result<VoicedPiece> {
    if !flat.len().is_multiple_of(VOICES) {
        return Err(Error::invalid(format!("stream length {} is not a multiple of {VOICES}", flat.len())));
    }
    let voices = std::array::from_fn(|v| flat.iter().skip(v).step_by(VOICES).copied().collect());
    VoicedPiece::new(voices)
}

/// `L × l` token matrix, stored row-major as the interleaved stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuredSequence {
    tokens: Vec<usize>,
    subsequence_tokens: usize,
}

impl StructuredSequence {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn subsequence_tokens(&self) -> usize {
        self.subsequence_tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.subsequence_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn subsequence(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.subsequence_tokens..(i + 1) * self.subsequence_tokens]
    }

    pub fn subsequences(&self) -> impl Iterator<Item = &[usize]> {
        self.tokens.chunks(self.subsequence_tokens)
    }
}

/// Cuts `flat` into rows of `l` tokens. `l` must be a positive multiple of
/// 4 dividing the stream length; pad with [`pad_to_multiple`] first.
pub fn split_subsequences(flat: &[usize], l: usize) -> Result<StructuredSequence> {
    if l == 0 || !l.is_multiple_of(VOICES) {
        return Err(Error::invalid(format!("subsequence length {l} must be a positive multiple of {VOICES}")));
    }
    if flat.is_empty() || !flat.len().is_multiple_of(l) {
        return Err(Error::invalid(format!("stream length {} is not a positive multiple of {l}", flat.len())));
    }
    Ok(StructuredSequence { tokens: flat.to_vec(), subsequence_tokens: l })
}

/// Appends `<pad>` until the length is a multiple of `l`.
pub fn pad_to_multiple(flat: &[usize], l: usize) -> Vec<usize> {
    let mut out = flat.to_vec();
    while !out.len().is_multiple_of(l) || out.is_empty() {
        out.push(PAD_INDEX);
    }
    out
}

/// Inclusive pitch bounds per voice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VoiceRanges {
    ranges: [(i32, i32); VOICES],
}

impl VoiceRanges {
    pub fn new(ranges: [(i32, i32); VOICES]) -> Result<Self> {
        if let Some(r) = ranges.iter().find(|(lo, hi)| lo > hi) {
            return Err(Error::invalid(format!("voice range {r:?} has min > max")));
        }
        Ok(Self { ranges })
    }

    pub fn get(&self, voice: usize) -> (i32, i32) {
        self.ranges[voice]
    }

    /// Per-voice min/max over the pitches that occur in `pieces`.
    pub fn observed(pieces: &[VoicedPiece], vocab: &Vocabulary) -> Result<Self> {
        let mut ranges = [(i32::MAX, i32::MIN); VOICES];
        for piece in pieces {
            for (v, voice) in piece.voices().iter().enumerate() {
                for p in voice.iter().filter_map(|&t| vocab.pitch_of(t)) {
                    ranges[v].0 = ranges[v].0.min(p);
                    ranges[v].1 = ranges[v].1.max(p);
                }
            }
        }
        if ranges.iter().any(|r| r.0 > r.1) {
            return Err(Error::invalid("a voice has no pitches; cannot infer its range"));
        }
        Self::new(ranges)
    }

    pub fn contains(&self, piece: &VoicedPiece, vocab: &Vocabulary) -> bool {
        piece.voices().iter().enumerate().all(|(v, voice)| {
            let (lo, hi) = self.ranges[v];
            voice.iter().filter_map(|&t| vocab.pitch_of(t)).all(|p| (lo..=hi).contains(&p))
        })
    }
}

/// Shifts every pitch token by `semitones`; `None` if a shifted pitch is
/// missing from the vocabulary.
pub fn transpose(piece: &VoicedPiece, vocab: &Vocabulary, semitones: i32) -> Option<VoicedPiece> {
    let mut voices: [Vec<usize>; VOICES] = Default::default();
    for (v, voice) in piece.voices().iter().enumerate() {
        voices[v] = voice
            .iter()
            .map(|&t| match vocab.pitch_of(t) {
                Some(p) => vocab.index_of_pitch(p + semitones),
                None => Some(t),
            })
            .collect::<Option<Vec<_>>>()?;
    }
    Some(VoicedPiece { voices })
}

/// Every semitone shift keeping each voice inside its range, ascending;
/// `0` is always included.
pub fn admissible_shifts(piece: &VoicedPiece, vocab: &Vocabulary, ranges: &VoiceRanges) -> Vec<i32> {
    let mut lo_shift = i32::MIN;
    let mut hi_shift = i32::MAX;
    let mut any_pitch = false;
    for (v, voice) in piece.voices().iter().enumerate() {
        let pitches: Vec<i32> = voice.iter().filter_map(|&t| vocab.pitch_of(t)).collect();
        let (Some(&pmin), Some(&pmax)) = (pitches.iter().min(), pitches.iter().max()) else { continue };
        any_pitch = true;
        let (rlo, rhi) = ranges.get(v);
        lo_shift = lo_shift.max(rlo - pmin);
        hi_shift = hi_shift.min(rhi - pmax);
    }
    if !any_pitch {
        return vec![0];
    }
    let mut shifts: Vec<i32> = (lo_shift..=hi_shift)
        .filter(|&s| s == 0 || transpose(piece, vocab, s).is_some())
        .collect();
    if !shifts.contains(&0) {
        shifts.push(0);
        shifts.sort_unstable();
    }
    shifts
}

/// The piece under every admissible shift, paired with the shift.
pub fn transposition_augment(piece: &VoicedPiece, vocab: &Vocabulary, ranges: &VoiceRanges) -> Vec<(i32, VoicedPiece)> {
    admissible_shifts(piece, vocab, ranges)
        .into_iter()
        .map(|s| (s, if s == 0 { piece.clone() } else { transpose(piece, vocab, s).expect("admissible") }))
        .collect()
}

/// Pieces over a shared vocabulary, with optional per-beat labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub pieces: Vec<VoicedPiece>,
    /// Hidden family label of every beat of every piece (synthetic corpora).
    pub labels: Option<Vec<Vec<usize>>>,
}

impl Corpus {
    pub fn new(vocab: Vocabulary, pieces: Vec<VoicedPiece>) -> Self {
        Self { vocab, pieces, labels: None }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Interleaved, padded, split pieces.
    pub fn sequences(&self, l: usize) -> Result<Vec<StructuredSequence>> {
        self.pieces.iter().map(|p| split_subsequences(&pad_to_multiple(&p.interleave(), l), l)).collect()
    }

    /// Copy restricted to the pieces at `idx`, labels included.
    pub fn select(&self, idx: &[usize]) -> Corpus {
        Corpus {
            vocab: self.vocab.clone(),
            pieces: idx.iter().map(|&i| self.pieces[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i].clone()).collect()),
        }
    }

    /// Seeded piece-level split into train/valid/test by `fractions`
    /// (train and valid shares; test takes the rest).
    pub fn split(&self, train: f64, valid: f64, seed: u64) -> (Corpus, Corpus, Corpus) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = self.len();
        let n_train = ((n as f64) * train).round() as usize;
        let n_valid = (((n as f64) * valid).round() as usize).min(n - n_train);
        let (a, rest) = idx.split_at(n_train);
        let (b, c) = rest.split_at(n_valid);
        (self.select(a), self.select(b), self.select(c))
    }

    /// Replaces every piece by all of its admissible transpositions.
    pub fn augment(&self, ranges: &VoiceRanges) -> Corpus {
        let mut pieces = Vec::new();
        let mut labels = self.labels.as_ref().map(|_| Vec::new());
        for (i, p) in self.pieces.iter().enumerate() {
            for (_, q) in transposition_augment(p, &self.vocab, ranges) {
                pieces.push(q);
                if let (Some(out), Some(src)) = (labels.as_mut(), self.labels.as_ref()) {
                    out.push(src[i].clone());
                }
            }
        }
        Corpus { vocab: self.vocab.clone(), pieces, labels }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#version 1")?;
        writeln!(w, "#ticks_per_beat {TICKS_PER_BEAT}")?;
        writeln!(w, "#vocab {}", self.vocab.symbols().join(" "))?;
        for p in &self.pieces {
            writeln!(w, "{}", format_piece(p, &self.vocab))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Corpus> {
        let mut vocab: Option<Vocabulary> = None;
        let mut pieces = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(header) = trimmed.strip_prefix('#') {
                let (key, value) = header.split_once(' ').unwrap_or((header, ""));
                match key {
                    "version" => {
                        if value.trim() != "1" {
                            return Err(Error::Version(format!("corpus version {:?}", value.trim())));
                        }
                    }
                    "ticks_per_beat" => {
                        if value.trim() != TICKS_PER_BEAT.to_string() {
                            return Err(Error::Malformed {
                                line: lineno,
                                message: format!("ticks_per_beat must be {TICKS_PER_BEAT}"),
                            });
                        }
                    }
                    "vocab" => {
                        let symbols = value.split_whitespace().map(String::from).collect();
                        vocab = Some(Vocabulary::new(symbols).map_err(|e| Error::Malformed {
                            line: lineno,
                            message: e.to_string(),
                        })?);
                    }
                    _ => {
                        return Err(Error::Malformed { line: lineno, message: format!("unknown header {key:?}") })
                    }
                }
                continue;
            }
            let Some(v) = vocab.as_ref() else {
                return Err(Error::Malformed { line: lineno, message: "piece before #vocab header".into() });
            };
            pieces.push(parse_piece(trimmed, v, lineno)?);
        }
        Ok(Corpus { vocab: vocab.unwrap_or_else(Vocabulary::reserved_only), pieces, labels: None })
    }

    /// Writes the corpus and, when present, its labels next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        if let Some(labels) = &self.labels {
            std::fs::write(labels_path(path), format_labels(labels))?;
        }
        Ok(())
    }

    /// Reads a corpus file plus its `.labels` sibling when one exists.
    pub fn load(path: &Path) -> Result<Corpus> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut corpus = Corpus::read(f)?;
        let lp = labels_path(path);
        if lp.exists() {
            let labels = parse_labels(&std::fs::read_to_string(&lp)?)?;
            if labels.len() != corpus.len() {
                return Err(Error::invalid(format!(
                    "{} has {} label lines for {} pieces",
                    lp.display(),
                    labels.len(),
                    corpus.len()
                )));
            }
            corpus.labels = Some(labels);
        }
        Ok(corpus)
    }
}

/// `corpus.txt` → `corpus.labels`.
pub fn labels_path(path: &Path) -> PathBuf {
    path.with_extension("labels")
}

pub fn format_labels(labels: &[Vec<usize>]) -> String {
    let mut s = String::new();
    for row in labels {
        let line: Vec<String> = row.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn parse_labels(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::Malformed { line: i + 1, message: format!("bad label {t:?}") })
                })
                .collect()
        })
        .collect()
}

/// One corpus line.
pub fn format_piece(piece: &VoicedPiece, vocab: &Vocabulary) -> String {
    piece
        .voices()
        .iter()
        .map(|v| v.iter().map(|&t| vocab.symbol(t)).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(" | ")
}

pub fn parse_piece(line: &str, vocab: &Vocabulary, lineno: usize) -> Result<VoicedPiece> {
    let parts: Vec<&str> = line.split('|').collect();
    if parts.len() != VOICES {
        return Err(Error::Malformed {
            line: lineno,
            message: format!("expected {VOICES} '|'-separated voices, found {}", parts.len()),
        });
    }
    let mut voices: [Vec<usize>; VOICES] = Default::default();
    for (v, part) in parts.iter().enumerate() {
        for tok in part.split_whitespace() {
            let idx = vocab
                .get(tok)
                .ok_or_else(|| Error::UnknownToken { token: tok.to_string(), line: lineno })?;
            voices[v].push(idx);
        }
    }
    VoicedPiece::new(voices).map_err(|e| Error::Malformed { line: lineno, message: e.to_string() })
}

/// Parameters of [`synthesize_corpus`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub families: usize,
    pub pieces: usize,
    pub length_beats: usize,
    pub seed: u64,
    /// Per-piece key offsets are drawn uniformly from `-max_shift..=max_shift`.
    pub max_shift: i32,
    /// Probability, in thousandths, that a pitch token is nudged by 1-2 semitones.
    pub noise_permille: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { families: 16, pieces: 200, length_beats: 24, seed: 7, max_shift: 3, noise_permille: 30 }
    }
}

/// Centre pitch of soprano, alto, tenor and bass in the synthetic corpus.
const SYNTH_CENTRES: [i32; VOICES] = [70, 64, 57, 48];
const SYNTH_SPREAD: i32 = 5;

/// Rhythms as onset flags per tick.
const RHYTHMS: [[bool; TICKS_PER_BEAT]; 5] = [
    [true, false, false, false],
    [true, false, true, false],
    [true, true, true, true],
    [true, false, false, true],
    [true, true, false, false],
];

/// Pitch range covered by synthetic corpora with the given key spread.
pub fn synth_pitch_range(max_shift: i32) -> (i32, i32) {
    let lo = SYNTH_CENTRES.iter().min().unwrap() - SYNTH_SPREAD - max_shift - 2;
    let hi = SYNTH_CENTRES.iter().max().unwrap() + SYNTH_SPREAD + max_shift + 2;
    (lo, hi)
}

/// One-beat pattern per family, as pitch offsets from the voice centre
/// (`None` = hold), `[voice][tick]`. Depends on `families` only.
pub fn family_patterns(families: usize) -> Vec<[[Option<i32>; TICKS_PER_BEAT]; VOICES]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + families as u64);
    let mut out: Vec<[[Option<i32>; TICKS_PER_BEAT]; VOICES]> = Vec::with_capacity(families);
    let distance = |a: &[[Option<i32>; TICKS_PER_BEAT]; VOICES], b: &[[Option<i32>; TICKS_PER_BEAT]; VOICES]| {
        (0..VOICES).flat_map(|v| (0..TICKS_PER_BEAT).map(move |t| (v, t))).filter(|&(v, t)| a[v][t] != b[v][t]).count()
    };
    while out.len() < families {
        let mut pat = [[None; TICKS_PER_BEAT]; VOICES];
        for voice in pat.iter_mut() {
            let rhythm = RHYTHMS[rng.gen_range(0..RHYTHMS.len())];
            for (t, slot) in voice.iter_mut().enumerate() {
                if rhythm[t] {
                    *slot = Some(rng.gen_range(-SYNTH_SPREAD..=SYNTH_SPREAD));
                }
            }
        }
        if out.iter().all(|q| distance(q, &pat) >= 6) {
            out.push(pat);
        }
    }
    out
}

/// Row-stochastic transition matrix of the family chain. Each family has
/// two preferred successors; a uniform floor keeps the chain ergodic.
pub fn family_chain(families: usize) -> Vec<Vec<f64>> {
    let f = families;
    if f == 1 {
        return vec![vec![1.0]];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xc4a1_0000 + f as u64);
    (0..f)
        .map(|i| {
            let mut row = vec![0.15 / f as f64; f];
            let a = rng.gen_range(0..f);
            let mut b = rng.gen_range(0..f);
            while b == a {
                b = rng.gen_range(0..f);
            }
            let _ = i;
            row[a] += 0.6;
            row[b] += 0.25;
            row
        })
        .collect()
}

fn power_iteration(chain: &[Vec<f64>]) -> Vec<f64> {
    let f = chain.len();
    let mut pi = vec![1.0 / f as f64; f];
    for _ in 0..1000 {
        let mut next = vec![0.0; f];
        for (i, row) in chain.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                next[j] += pi[i] * p;
            }
        }
        pi = next;
    }
    pi
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Deterministic desk-scale corpus of Markov-chained pattern families,
/// each piece in a random key, with labels.
pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    if cfg.families == 0 || cfg.length_beats == 0 {
        return Err(Error::invalid("families and length_beats must be positive"));
    }
    let (lo, hi) = synth_pitch_range(cfg.max_shift);
    let vocab = Vocabulary::with_pitch_range(lo, hi);
    let hold = vocab.get(HOLD).expect("hold token");
    let patterns = family_patterns(cfg.families);
    let chain = family_chain(cfg.families);
    let stationary = power_iteration(&chain);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pieces = Vec::with_capacity(cfg.pieces);
    let mut labels = Vec::with_capacity(cfg.pieces);
    for _ in 0..cfg.pieces {
        let key = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
        let mut family = draw(&mut rng, &stationary);
        let mut voices: [Vec<usize>; VOICES] = Default::default();
        let mut fams = Vec::with_capacity(cfg.length_beats);
        for beat in 0..cfg.length_beats {
            if beat > 0 {
                family = draw(&mut rng, &chain[family]);
            }
            fams.push(family);
            for (v, voice) in voices.iter_mut().enumerate() {
                for &step in &patterns[family][v][..TICKS_PER_BEAT] {
                    let tok = match step {
                        None => hold,
                        Some(off) => {
                            let mut p = SYNTH_CENTRES[v] + off + key;
                            if rng.gen_range(0..1000) < cfg.noise_permille {
                                p += [-2, -1, 1, 2][rng.gen_range(0..4)];
                            }
                            vocab.index_of_pitch(p).expect("pitch inside synthetic range")
                        }
                    };
                    voice.push(tok);
                }
            }
        }
        pieces.push(VoicedPiece::new(voices)?);
        labels.push(fams);
    }
    Ok(Corpus { vocab, pieces, labels: Some(labels) })
}
