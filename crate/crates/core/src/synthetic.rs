//! Seeded synthetic abstracts whose labels need cross-sentence context.
//!
//! Most sentences carry keywords of their own label. An ambiguous sentence
//! carries only a shared cue word, and its label is a fixed permutation of
//! the label two sentences earlier. Labels of unambiguous sentences are drawn
//! independently, so neither the sentence itself nor its immediate neighbours
//! reveal an ambiguous sentence's label.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Abstract, Label, Sentence, TokenizerConfig, NUM_LABELS};
use crate::error::{Error, Result};
use crate::numeric::rng::{seeded, substream};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub abstracts: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Chance that an eligible position (two unambiguous predecessors) is ambiguous.
    pub ambiguous_rate: f64,
    pub keywords_per_label: usize,
    pub fillers: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            abstracts: 300,
            min_sentences: 5,
            max_sentences: 10,
            ambiguous_rate: 0.5,
            keywords_per_label: 3,
            fillers: 12,
            seed: 0,
        }
    }
}

/// Label of an ambiguous sentence given the label two positions back.
pub fn ambiguous_label(two_back: usize) -> usize {
    (two_back + 3) % NUM_LABELS
}

/// The shared cue word of ambiguous sentences.
pub const CUE: &str = "whereupon";

fn letters(mut n: usize) -> String {
    let mut s = String::new();
    loop {
        s.insert(0, (b'a' + (n % 26) as u8) as char);
        n /= 26;
        if n == 0 {
            return s;
        }
        n -= 1;
    }
}

pub fn keyword(label: usize, j: usize) -> String {
    format!("kw{}{}", Label::ALL[label].tag().to_ascii_lowercase(), letters(j))
}

pub fn filler(j: usize) -> String {
    format!("fill{}", letters(j))
}

/// Every word the generator can emit.
pub fn lexicon(config: &SyntheticConfig) -> Vec<String> {
    let mut words: Vec<String> = (0..NUM_LABELS)
        .flat_map(|l| (0..config.keywords_per_label).map(move |j| keyword(l, j)))
        .collect();
    words.extend((0..config.fillers).map(filler));
    words.push(CUE.into());
    words
}

/// Generates the corpus and, per abstract, which sentences are ambiguous.
pub fn generate(config: &SyntheticConfig) -> Result<(Vec<Abstract>, Vec<Vec<bool>>)> {
    if config.min_sentences == 0
        || config.min_sentences > config.max_sentences
        || config.keywords_per_label == 0
        || config.fillers == 0
        || !(0.0..=1.0).contains(&config.ambiguous_rate)
    {
        return Err(Error::Config(format!("invalid synthetic corpus settings {config:?}")));
    }
    let tok = TokenizerConfig::default();
    let mut rng = seeded(config.seed);
    let fillers: Vec<String> = (0..config.fillers).map(filler).collect();
    let mut abstracts = Vec::with_capacity(config.abstracts);
    let mut flags = Vec::with_capacity(config.abstracts);
    for a in 0..config.abstracts {
        let n = rng.random_range(config.min_sentences..=config.max_sentences);
        let mut labels: Vec<usize> = Vec::with_capacity(n);
        let mut ambiguous: Vec<bool> = Vec::with_capacity(n);
        let mut sentences = Vec::with_capacity(n);
        for t in 0..n {
            let eligible = t >= 2 && !ambiguous[t - 1] && !ambiguous[t - 2];
            let amb = eligible && rng.random::<f64>() < config.ambiguous_rate;
            let label = if amb {
                ambiguous_label(labels[t - 2])
            } else {
                rng.random_range(0..NUM_LABELS)
            };
            let mut words: Vec<String> = Vec::new();
            if amb {
                words.push(CUE.into());
            } else {
                for _ in 0..rng.random_range(1..=2) {
                    words.push(keyword(label, rng.random_range(0..config.keywords_per_label)));
                }
            }
            for _ in 0..rng.random_range(2..=5) {
                words.push(fillers.choose(&mut rng).expect("fillers non-empty").clone());
            }
            // Shuffle so the informative word is not always first.
            for i in (1..words.len()).rev() {
                words.swap(i, rng.random_range(0..=i));
            }
            let text = words.join(" ");
            sentences.push(Sentence::new(&text, Label::from_index(label), &tok)?);
            labels.push(label);
            ambiguous.push(amb);
        }
        abstracts.push(Abstract {
            id: format!("syn{a:05}"),
            sentences,
        });
        flags.push(ambiguous);
    }
    Ok((abstracts, flags))
}

/// Independent standard-normal vectors for every lexicon word.
pub fn embeddings(config: &SyntheticConfig, dim: usize, seed: u64) -> BTreeMap<String, Vec<f64>> {
    lexicon(config)
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut rng = substream(seed, i as u64);
            let v = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            (w, v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_the_rule() {
        let cfg = SyntheticConfig { abstracts: 200, ..SyntheticConfig::default() };
        let (corpus, flags) = generate(&cfg).unwrap();
        assert_eq!(corpus.len(), 200);
        let mut amb = 0;
        let mut total = 0;
        for (a, f) in corpus.iter().zip(&flags) {
            let gold = a.gold().unwrap();
            assert!((5..=10).contains(&gold.len()));
            for t in 0..gold.len() {
                total += 1;
                let s = &a.sentences[t];
                if f[t] {
                    amb += 1;
                    assert!(!f[t - 1] && !f[t - 2]);
                    assert_eq!(gold[t], ambiguous_label(gold[t - 2]));
                    assert!(s.tokens.iter().any(|w| w == CUE));
                    assert!(!s.tokens.iter().any(|w| w.starts_with("kw")));
                } else {
                    let own = keyword(gold[t], 0);
                    assert!(s.tokens.iter().all(|w| !w.starts_with("kw") || w.starts_with(&own[..3])));
                }
            }
        }
        let rate = amb as f64 / total as f64;
        assert!((0.15..0.3).contains(&rate), "{rate}");
    }

    #[test]
    fn seeded_and_covered() {
        let cfg = SyntheticConfig { abstracts: 20, ..SyntheticConfig::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let emb = embeddings(&cfg, 8, 1);
        let (corpus, _) = generate(&cfg).unwrap();
        for a in &corpus {
            for s in &a.sentences {
                for w in &s.tokens {
                    assert_eq!(emb[w].len(), 8);
                }
            }
        }
        assert_eq!(letters(0), "a");
        assert_eq!(letters(26), "aa");
    }
}
