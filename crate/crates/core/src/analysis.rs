//! Probes over learnt codes: cluster dumps, usage, label purity, agreement
//! between clusterings and invariance under transposition.

use std::collections::HashMap;
use std::path::Path;

use crate::corpus::{admissible_shifts, deinterleave, transpose, Corpus, VoiceRanges, VoicedPiece};
use crate::cpc::{encode_corpus, CodeEncoder};
use crate::error::{Error, Result};
use crate::quantizer::{usage_stats, UsageStats};

/// One subsequence with its provenance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Member {
    pub piece: usize,
    pub position: usize,
    pub tokens: Vec<usize>,
}

/// Subsequences grouped by code; `clusters[c]` may be empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterDump {
    pub clusters: Vec<Vec<Member>>,
}

pub fn cluster_dump(corpus: &Corpus, encoder: &dyn CodeEncoder) -> Result<ClusterDump> {
    let l = encoder.subsequence_tokens();
    let mut clusters = vec![Vec::new(); encoder.codebook_size()];
    for (piece, seq) in corpus.sequences(l)?.iter().enumerate() {
        for (position, code) in encoder.encode_sequence(seq)?.into_iter().enumerate() {
            clusters[code].push(Member { piece, position, tokens: seq.subsequence(position).to_vec() });
        }
    }
    Ok(ClusterDump { clusters })
}

impl ClusterDump {
    /// Writes `<dir>/<code>.txt` (a corpus file, one subsequence per line)
    /// and `<dir>/<code>.index` (`piece position` per line) for every code.
    pub fn write(&self, dir: &Path, corpus: &Corpus) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (code, members) in self.clusters.iter().enumerate() {
            let pieces: Vec<VoicedPiece> = members.iter().map(|m| deinterleave(&m.tokens)).collect::<Result<_>>()?;
            Corpus::new(corpus.vocab.clone(), pieces).save(&dir.join(format!("{code}.txt")))?;
            let index: String = members.iter().map(|m| format!("{} {}\n", m.piece, m.position)).collect();
            std::fs::write(dir.join(format!("{code}.index")), index)?;
        }
        Ok(())
    }
}

pub fn code_histogram(corpus: &Corpus, encoder: &dyn CodeEncoder) -> Result<UsageStats> {
    let codes: Vec<usize> = encode_corpus(encoder, corpus)?.concat();
    if codes.is_empty() {
        return Err(Error::invalid("code histogram of an empty corpus"));
    }
    usage_stats(&codes, encoder.codebook_size())
}

/// `Σ_code max_label count(code, label) / n`.
pub fn purity(codes: &[usize], labels: &[usize]) -> Result<f64> {
    if codes.len() != labels.len() || codes.is_empty() {
        return Err(Error::invalid("purity needs equally many, nonzero codes and labels"));
    }
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    for (&c, &l) in codes.iter().zip(labels) {
        *table.entry((c, l)).or_default() += 1;
    }
    let mut best: HashMap<usize, usize> = HashMap::new();
    for (&(c, _), &n) in &table {
        let b = best.entry(c).or_default();
        *b = (*b).max(n);
    }
    Ok(best.values().sum::<usize>() as f64 / codes.len() as f64)
}

/// Purity of `encoder`'s codes against the corpus's family labels.
pub fn cluster_purity(corpus: &Corpus, encoder: &dyn CodeEncoder) -> Result<f64> {
    let labels = corpus.labels.as_ref().ok_or_else(|| Error::invalid("corpus carries no labels"))?;
    let codes = encode_corpus(encoder, corpus)?;
    let mut flat_codes = Vec::new();
    let mut flat_labels = Vec::new();
    for (c, l) in codes.iter().zip(labels) {
        // labels cover real beats; trailing padded subsequences have none
        let n = c.len().min(l.len());
        flat_codes.extend_from_slice(&c[..n]);
        flat_labels.extend_from_slice(&l[..n]);
    }
    purity(&flat_codes, &flat_labels)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("ARI needs two equal-length labelings of at least two items"));
    }
    let choose2 = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ra: HashMap<usize, usize> = HashMap::new();
    let mut rb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&n| choose2(n)).sum();
    let sa: f64 = ra.values().map(|&n| choose2(n)).sum();
    let sb: f64 = rb.values().map(|&n| choose2(n)).sum();
    let total = choose2(a.len());
    let expected = sa * sb / total;
    let max = (sa + sb) / 2.0;
    if max == expected {
        // both labelings trivial in the same way
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Fraction of `(subsequence, nonzero admissible shift)` pairs whose code is
/// unchanged by the shift; `1.0` when no piece admits a nonzero shift.
pub fn transposition_consistency(corpus: &Corpus, encoder: &dyn CodeEncoder, ranges: &VoiceRanges) -> Result<f64> {
    let l = encoder.subsequence_tokens();
    let (mut same, mut total) = (0usize, 0usize);
    for (piece, seq) in corpus.pieces.iter().zip(corpus.sequences(l)?) {
        let base = encoder.encode_sequence(&seq)?;
        for s in admissible_shifts(piece, &corpus.vocab, ranges) {
            if s == 0 {
                continue;
            }
            let moved = transpose(piece, &corpus.vocab, s).expect("admissible shift");
            let moved = Corpus::new(corpus.vocab.clone(), vec![moved]).sequences(l)?.remove(0);
            let codes = encoder.encode_sequence(&moved)?;
            same += base.iter().zip(&codes).filter(|(a, b)| a == b).count();
            total += base.len();
        }
    }
    Ok(if total == 0 { 1.0 } else { same as f64 / total as f64 })
}

/// Token-level Levenshtein distance.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Fraction of positions where two equal-length code sequences agree.
pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len().max(b.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{StructuredSequence, Vocabulary, VOICES};
    use crate::quantizer::Codebook;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Code = (first token of the subsequence) mod C, or a constant.
    struct Fake {
        constant: bool,
    }

    impl CodeEncoder for Fake {
        fn subsequence_tokens(&self) -> usize {
            4
        }
        fn vocab_size(&self) -> usize {
            60
        }
        fn codebook(&self) -> Codebook {
            Codebook::new(4, 1, vec![0.0, 1.0, 2.0, 3.0], 0.25).unwrap()
        }
        fn embed_sequence(&self, seq: &StructuredSequence) -> Result<Vec<Vec<f64>>> {
            Ok(seq.subsequences().map(|s| vec![if self.constant { 0.0 } else { (s[0] % 4) as f64 }]).collect())
        }
        fn checkpoint_bytes(&self) -> Vec<u8> {
            vec![self.constant as u8]
        }
    }

    fn small_corpus() -> Corpus {
        let v = Vocabulary::with_pitch_range(40, 50);
        let pieces = (0..3)
            .map(|p| {
                let steps: Vec<usize> = (0..5).map(|t| 8 + (p + t) % 4).collect();
                VoicedPiece::new(std::array::from_fn(|_| steps.clone())).unwrap()
            })
            .collect();
        Corpus::new(v, pieces)
    }

    #[test]
    fn dump_is_a_partition_and_deterministic() {
        let c = small_corpus();
        let d = cluster_dump(&c, &Fake { constant: false }).unwrap();
        let mut all: Vec<(usize, usize)> = d.clusters.iter().flatten().map(|m| (m.piece, m.position)).collect();
        all.sort_unstable();
        let expected: Vec<(usize, usize)> = (0..3).flat_map(|p| (0..5).map(move |i| (p, i))).collect();
        assert_eq!(all, expected);
        assert_eq!(d, cluster_dump(&c, &Fake { constant: false }).unwrap());
        let constant = cluster_dump(&c, &Fake { constant: true }).unwrap();
        assert!(constant.clusters[1..].iter().all(Vec::is_empty));
        let dir = tempfile::tempdir().unwrap();
        constant.write(dir.path(), &c).unwrap();
        assert!(Corpus::load(&dir.path().join("3.txt")).unwrap().is_empty());
        assert_eq!(Corpus::load(&dir.path().join("0.txt")).unwrap().len(), 15);
    }

    #[test]
    fn histogram_bounds() {
        let c = small_corpus();
        let h = code_histogram(&c, &Fake { constant: false }).unwrap();
        assert!(h.perplexity <= 4.0 + 1e-12);
        assert!((code_histogram(&c, &Fake { constant: true }).unwrap().perplexity - 1.0).abs() < 1e-12);
        assert!(code_histogram(&Corpus::new(c.vocab.clone(), vec![]), &Fake { constant: true }).is_err());
    }

    #[test]
    fn purity_examples() {
        let labels: Vec<usize> = (0..160).map(|i| i % 16).collect();
        assert_eq!(purity(&labels, &labels).unwrap(), 1.0);
        assert!((purity(&[0; 160], &labels).unwrap() - 1.0 / 16.0).abs() < 1e-12);
        // simulated random assignment
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 16).collect();
        let codes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..16)).collect();
        assert!((purity(&codes, &labels).unwrap() - 1.0 / 16.0).abs() < 0.03);
        assert!(cluster_purity(&small_corpus(), &Fake { constant: true }).is_err());
    }

    #[test]
    fn ari_examples() {
        let a = [0, 0, 1, 1, 2, 2];
        assert!((adjusted_rand_index(&a, &[5, 5, 3, 3, 9, 9]).unwrap() - 1.0).abs() < 1e-12);
        // hand-computed: contingency [[2,0],[1,1]] etc.
        let x = [0, 0, 0, 1, 1, 1];
        let y = [0, 0, 1, 1, 2, 2];
        // index = C(2,2)+C(1,2)+C(1,2)+C(2,2) = 2; sa = 3+3 = 6; sb = 1+1+1 = 3;
        // total = 15; expected = 18/15 = 1.2; max = 4.5 → (2-1.2)/(4.5-1.2)
        assert!((adjusted_rand_index(&x, &y).unwrap() - 0.8 / 3.3).abs() < 1e-12);
    }

    #[test]
    fn transposition_consistency_examples() {
        let c = small_corpus();
        let ranges = VoiceRanges::new([(40, 50); VOICES]).unwrap();
        assert_eq!(transposition_consistency(&c, &Fake { constant: true }, &ranges).unwrap(), 1.0);
        let v = &c.vocab;
        let wide: Vec<VoicedPiece> = c
            .pieces
            .iter()
            .map(|p| {
                let mut voices = p.voices().clone();
                voices[0][0] = v.index_of_pitch(40).unwrap();
                voices[0][1] = v.index_of_pitch(50).unwrap();
                VoicedPiece::new(voices).unwrap()
            })
            .collect();
        let wide = Corpus::new(v.clone(), wide);
        // voice 0 spans its whole range, so only the identity shift is admissible
        assert_eq!(transposition_consistency(&wide, &Fake { constant: false }, &ranges).unwrap(), 1.0);
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[4, 4]), 2);
        assert_eq!(edit_distance(&[1, 2, 3, 4], &[2, 1, 3, 5]), 3);
    }

    proptest! {
        #[test]
        fn purity_ignores_code_relabeling(codes in proptest::collection::vec(0usize..6, 1..60), perm_seed in 0u64..100) {
            let labels: Vec<usize> = codes.iter().enumerate().map(|(i, c)| (i * 7 + c) % 5).collect();
            let mut perm: Vec<usize> = (0..6).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let relabeled: Vec<usize> = codes.iter().map(|&c| perm[c]).collect();
            prop_assert_eq!(purity(&codes, &labels).unwrap(), purity(&relabeled, &labels).unwrap());
            let p = purity(&codes, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
