//! Vocabulary statistics, embedding tables and frequency-weighted
//! normalization.
//!
//! Normalization maps every row `e_k` to `(e_k - E) / sqrt(Var)` where the
//! per-dimension moments are weighted by the training-token relative
//! frequencies `f_j` of the vocabulary:
//! `E = Σ_j f_j e_j` and `Var = Σ_j f_j (e_j - E)²`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::corpus::Abstract;
use crate::error::{Error, Result};
use crate::hash::Fingerprint;
use crate::math::sqrt;
use crate::numeric::rng::substream;
use crate::Tensor;

pub const UNK: &str = "<unk>";
pub const UNK_INDEX: usize = 0;
pub const DEFAULT_DIM: usize = 200;
pub const DEFAULT_MIN_COUNT: u64 = 2;
/// Range of the uniform initializer for words missing from a pretrained file.
pub const FALLBACK_SCALE: f64 = 0.1;
/// Dimensions with weighted variance below this are centered but not scaled.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Word index with relative token frequencies from the training split.
///
/// `<unk>` always occupies index 0. Its frequency is the share of training
/// tokens that fell below `min_count` and may be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
    counts: Vec<u64>,
    frequencies: Vec<f64>,
}

impl Vocab {
    /// Rebuilds a vocabulary from words (index order, `<unk>` first) and raw counts.
    pub fn from_counts(words: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if words.len() != counts.len() || words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Validation("vocabulary must start with <unk> and have one count per word".into()));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Config("vocabulary built from an empty corpus".into()));
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Validation(alloc::format!("duplicate vocabulary word {w}")));
            }
        }
        let frequencies = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self {
            words,
            index,
            counts,
            frequencies,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Index of `word`, or of `<unk>`.
    pub fn lookup(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK_INDEX)
    }

    pub fn frequency(&self, word: &str) -> Option<f64> {
        self.get(word).map(|i| self.frequencies[i])
    }

    pub fn fingerprint(&self) -> u64 {
        let mut fp = Fingerprint::new();
        for (w, c) in self.words.iter().zip(&self.counts) {
            fp.str(w).u64(*c);
        }
        fp.finish()
    }
}

/// Counts tokens of the given (training) abstracts; words seen fewer than
/// `min_count` times are folded into `<unk>`.
pub fn build_vocab<'a, I>(training: I, min_count: u64) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a Abstract>,
{
    let mut raw: BTreeMap<&str, u64> = BTreeMap::new();
    for abs in training {
        for s in &abs.sentences {
            for t in &s.tokens {
                *raw.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    if raw.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut words = alloc::vec![UNK.to_string()];
    let mut counts = alloc::vec![0u64];
    for (w, c) in raw {
        if w == UNK || c < min_count {
            counts[UNK_INDEX] += c;
        } else {
            words.push(w.to_string());
            counts.push(c);
        }
    }
    Vocab::from_counts(words, counts)
}

/// Pretrained vectors addressable by word.
pub trait EmbeddingSource {
    fn dim(&self) -> usize;
    fn vector(&self, word: &str) -> Option<&[f64]>;
}

impl EmbeddingSource for BTreeMap<String, Vec<f64>> {
    fn dim(&self) -> usize {
        self.values().next().map_or(0, Vec::len)
    }

    fn vector(&self, word: &str) -> Option<&[f64]> {
        self.get(word).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vectors: Tensor,
    normalized: bool,
}

/// Outcome of [`EmbeddingTable::from_source`].
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub found: usize,
    pub total: usize,
}

impl Coverage {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.found as f64 / self.total as f64
        }
    }
}

/// Fallback row for `word`; depends only on `(seed, word)`.
pub fn fallback_row(word: &str, dim: usize, seed: u64) -> Vec<f64> {
    let stream = Fingerprint::new().str(word).finish();
    let mut rng = substream(seed, stream);
    (0..dim).map(|_| rng.random_range(-FALLBACK_SCALE..FALLBACK_SCALE)).collect()
}

impl EmbeddingTable {
    /// Raw (unnormalized) table from `K × D` vectors.
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.cols() == 0 {
            return Err(Error::dim(alloc::format!("embedding matrix of shape {:?}", vectors.shape())));
        }
        vectors.check_finite("embedding table")?;
        Ok(Self {
            vectors,
            normalized: false,
        })
    }

    /// One row per vocabulary word: copied from `source` when present, drawn
    /// from [`fallback_row`] otherwise.
    pub fn from_source<S: EmbeddingSource + ?Sized>(vocab: &Vocab, source: &S, seed: u64) -> Result<(Self, Coverage)> {
        let dim = source.dim();
        if dim == 0 {
            return Err(Error::Config("embedding source has dimension 0".into()));
        }
        let mut vectors = Tensor::zeros(&[vocab.len(), dim]);
        let mut found = 0;
        for (i, w) in vocab.words().iter().enumerate() {
            match source.vector(w) {
                Some(v) if v.len() == dim => {
                    vectors.row_mut(i).copy_from_slice(v);
                    found += 1;
                }
                Some(v) => {
                    return Err(Error::dim(alloc::format!(
                        "vector for {w} has {} dimensions, expected {dim}",
                        v.len()
                    )))
                }
                None => vectors.row_mut(i).copy_from_slice(&fallback_row(w, dim, seed)),
            }
        }
        let table = Self::new(vectors)?;
        Ok((
            table,
            Coverage {
                found,
                total: vocab.len(),
            },
        ))
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    /// Checksum of the exact table contents.
    pub fn fingerprint(&self) -> u64 {
        let mut fp = Fingerprint::new();
        fp.u64(u64::from(self.normalized)).u64(self.dim() as u64).f64s(self.vectors.data());
        fp.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationReport {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Dimensions whose variance fell below [`DEGENERATE_VARIANCE`]; they are
    /// centered and left unscaled.
    pub degenerate_dims: Vec<usize>,
}

/// Centers and scales every dimension with frequency-weighted moments.
pub fn normalize_embeddings(table: &EmbeddingTable, vocab: &Vocab) -> Result<(EmbeddingTable, NormalizationReport)> {
    if table.normalized {
        return Err(Error::State("embedding table is already normalized".into()));
    }
    if table.len() != vocab.len() {
        return Err(Error::dim(alloc::format!(
            "table has {} rows for a vocabulary of {}",
            table.len(),
            vocab.len()
        )));
    }
    let d = table.dim();
    let f = vocab.frequencies();
    let mut mean = alloc::vec![0.0; d];
    for (k, &fk) in f.iter().enumerate() {
        for (m, e) in mean.iter_mut().zip(table.row(k)) {
            *m += fk * e;
        }
    }
    let mut variance = alloc::vec![0.0; d];
    for (k, &fk) in f.iter().enumerate() {
        for ((v, e), m) in variance.iter_mut().zip(table.row(k)).zip(&mean) {
            *v += fk * (e - m) * (e - m);
        }
    }
    let mut degenerate_dims = Vec::new();
    let scale: Vec<f64> = variance
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            if v < DEGENERATE_VARIANCE {
                degenerate_dims.push(j);
                1.0
            } else {
                sqrt(v)
            }
        })
        .collect();
    let mut vectors = table.vectors.clone();
    for k in 0..vectors.rows() {
        for ((x, m), s) in vectors.row_mut(k).iter_mut().zip(&mean).zip(&scale) {
            *x = (*x - m) / s;
        }
    }
    Ok((
        EmbeddingTable {
            vectors,
            normalized: true,
        },
        NormalizationReport {
            mean,
            variance,
            degenerate_dims,
        },
    ))
}

/// Looks up each token (unknown words map to `<unk>`); returns `[n, D]`.
pub fn embed_sentence<S: AsRef<str>>(tokens: &[S], vocab: &Vocab, table: &EmbeddingTable) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::EmptySentence);
    }
    if !table.normalized {
        return Err(Error::State("embedding table must be normalized before lookup".into()));
    }
    let d = table.dim();
    let mut out = Tensor::zeros(&[tokens.len(), d]);
    for (i, t) in tokens.iter().enumerate() {
        out.row_mut(i).copy_from_slice(table.row(vocab.lookup(t.as_ref())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Sentence, TokenizerConfig};
    use crate::numeric::rng::seeded;
    use alloc::vec;
    use alloc::vec::Vec;

    fn corpus(tokens: &[&str]) -> Abstract {
        let cfg = TokenizerConfig::default();
        let mut s = Sentence::new("x", None, &cfg).unwrap();
        s.tokens = tokens.iter().map(|t| t.to_string()).collect();
        Abstract {
            id: "c".into(),
            sentences: vec![s],
        }
    }

    #[test]
    fn frequencies_from_counts() {
        let v = build_vocab([&corpus(&["a", "a", "b"])], 1).unwrap();
        assert!((v.frequency("a").unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((v.frequency("b").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(v.frequency(UNK), Some(0.0));
    }

    #[test]
    fn rare_words_fold_into_unk() {
        let v = build_vocab([&corpus(&["a", "a", "b"])], 2).unwrap();
        assert_eq!(v.words(), &[UNK.to_string(), "a".to_string()]);
        assert!((v.frequency(UNK).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(v.lookup("b"), UNK_INDEX);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(build_vocab(core::iter::empty(), 1), Err(Error::Config(_))));
    }

    #[test]
    fn hundred_token_corpus_matches_hand_counts() {
        // 40 × "w0", 30 × "w1", 20 × "w2", 9 × "w3", 1 × "w4"
        let mut toks = Vec::new();
        for (w, n) in [("w0", 40), ("w1", 30), ("w2", 20), ("w3", 9), ("w4", 1)] {
            toks.extend(core::iter::repeat(w).take(n));
        }
        let v = build_vocab([&corpus(&toks)], 2).unwrap();
        assert!((v.frequencies().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v.frequency("w0"), Some(0.40));
        assert_eq!(v.frequency("w3"), Some(0.09));
        assert_eq!(v.frequency(UNK), Some(0.01));
    }

    fn vocab_from(freqs: &[u64]) -> Vocab {
        let mut words = vec![UNK.to_string()];
        words.extend((1..freqs.len()).map(|i| alloc::format!("w{i}")));
        Vocab::from_counts(words, freqs.to_vec()).unwrap()
    }

    #[test]
    fn already_standard_table_is_a_fixed_point() {
        let v = vocab_from(&[1, 1]);
        let t = EmbeddingTable::new(Tensor::from_vec(&[2, 1], vec![1.0, -1.0]).unwrap()).unwrap();
        let (n, report) = normalize_embeddings(&t, &v).unwrap();
        assert_eq!(n.vectors().data(), &[1.0, -1.0]);
        assert!(report.degenerate_dims.is_empty());
    }

    #[test]
    fn hand_evaluated_normalization() {
        let v = vocab_from(&[1, 1]);
        let t = EmbeddingTable::new(Tensor::from_vec(&[2, 1], vec![3.0, 1.0]).unwrap()).unwrap();
        let (n, report) = normalize_embeddings(&t, &v).unwrap();
        assert_eq!(report.mean, vec![2.0]);
        assert_eq!(report.variance, vec![1.0]);
        assert_eq!(n.vectors().data(), &[1.0, -1.0]);
    }

    #[test]
    fn degenerate_dimension_is_flagged() {
        let v = vocab_from(&[1, 3]);
        let t = EmbeddingTable::new(Tensor::from_vec(&[2, 2], vec![5.0, 1.0, 5.0, 2.0]).unwrap()).unwrap();
        let (n, report) = normalize_embeddings(&t, &v).unwrap();
        assert_eq!(report.degenerate_dims, vec![0]);
        assert_eq!(n.row(0)[0], 0.0);
        assert!(normalize_embeddings(&n, &v).is_err());
    }

    #[test]
    fn source_rows_are_copied_and_fallbacks_are_seeded() {
        let v = vocab_from(&[1, 2, 3]);
        let mut src: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        src.insert("w1".into(), vec![0.5, 1.5, -2.0]);
        src.insert("w2".into(), vec![1.0, 0.0, 3.0]);
        let (t, cov) = EmbeddingTable::from_source(&v, &src, 7).unwrap();
        assert_eq!(t.row(1), &[0.5, 1.5, -2.0]);
        assert_eq!(t.row(2), &[1.0, 0.0, 3.0]);
        assert_eq!(cov.found, 2);
        assert_eq!(t.row(0), fallback_row(UNK, 3, 7).as_slice());
        let (again, _) = EmbeddingTable::from_source(&v, &src, 7).unwrap();
        assert_eq!(again, t);
        let (other, _) = EmbeddingTable::from_source(&v, &src, 8).unwrap();
        assert_ne!(other.row(0), t.row(0));
    }

    #[test]
    fn lookup_uses_unk_row() {
        let v = vocab_from(&[1, 2]);
        let mut rng = seeded(1);
        let raw = EmbeddingTable::new(Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng)).unwrap();
        assert!(matches!(embed_sentence(&["w1"], &v, &raw), Err(Error::State(_))));
        let (t, _) = normalize_embeddings(&raw, &v).unwrap();
        let e = embed_sentence(&["w1", "nope", "w1"], &v, &t).unwrap();
        assert_eq!(e.shape(), &[3, 4]);
        assert_eq!(e.row(0), t.row(1));
        assert_eq!(e.row(1), t.row(UNK_INDEX));
        assert_eq!(embed_sentence::<&str>(&[], &v, &t), Err(Error::EmptySentence));
    }

    /// Kahan-compensated weighted moments, summed in reverse row order.
    fn compensated_moments(t: &EmbeddingTable, f: &[f64], dim: usize) -> (f64, f64) {
        let kahan = |terms: &mut dyn Iterator<Item = f64>| {
            let (mut sum, mut c) = (0.0f64, 0.0f64);
            for x in terms {
                let y = x - c;
                let s = sum + y;
                c = (s - sum) - y;
                sum = s;
            }
            sum
        };
        let n = t.len();
        let mean = kahan(&mut (0..n).rev().map(|k| f[k] * t.row(k)[dim]));
        let var = kahan(&mut (0..n).rev().map(|k| f[k] * (t.row(k)[dim] - mean) * (t.row(k)[dim] - mean)));
        (mean, var)
    }

    #[test]
    fn normalized_moments_hold_against_compensated_oracle() {
        let mut rng = seeded(42);
        for _ in 0..5 {
            let k = rng.random_range(2..200);
            let d = rng.random_range(1..20);
            let counts: Vec<u64> = (0..k).map(|_| rng.random_range(1..1000)).collect();
            let v = vocab_from(&counts);
            let raw = EmbeddingTable::new(Tensor::uniform(&[k, d], -3.0, 5.0, &mut rng)).unwrap();
            let (t, _) = normalize_embeddings(&raw, &v).unwrap();
            for j in 0..d {
                let (m, var) = compensated_moments(&t, v.frequencies(), j);
                assert!(m.abs() < 1e-6);
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }
}
