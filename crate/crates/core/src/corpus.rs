//! Labeled abstracts, the line-delimited dataset format, tokenization and
//! cross-validation folds.
//!
//! Dataset format (UTF-8, one record per line):
//!
//! ```text
//! ###28449281
//! A|The aims of the trial were ...
//! M|Open-label randomized parallel-group controlled trial ...
//!
//! ###next-id
//! ...
//! ```
//!
//! `###<id>` opens an abstract, each following line is `<LABEL>|<sentence>`
//! and a blank line (or end of input) closes it. For prediction the
//! `<LABEL>|` prefix may be left out.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numeric::rng::seeded;

pub const NUM_LABELS: usize = 7;

/// Rhetorical role of a sentence. Index order follows [`Label::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Aim,
    Participants,
    Intervention,
    Outcome,
    Method,
    Results,
    Conclusion,
}

impl Label {
    pub const ALL: [Label; NUM_LABELS] = [
        Label::Aim,
        Label::Participants,
        Label::Intervention,
        Label::Outcome,
        Label::Method,
        Label::Results,
        Label::Conclusion,
    ];

    /// The three PICO elements reported in headline metrics.
    pub const PIO: [Label; 3] = [Label::Participants, Label::Intervention, Label::Outcome];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn tag(self) -> char {
        match self {
            Label::Aim => 'A',
            Label::Participants => 'P',
            Label::Intervention => 'I',
            Label::Outcome => 'O',
            Label::Method => 'M',
            Label::Results => 'R',
            Label::Conclusion => 'C',
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .iter()
            .copied()
            .find(|l| s.len() == 1 && s.starts_with(l.tag()))
            .ok_or_else(|| Error::Validation(alloc::format!("unknown label tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    /// Replace digit runs (with embedded `.`/`,` between digits) by [`NUM_TOKEN`].
    pub collapse_digits: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            collapse_digits: true,
        }
    }
}

pub const NUM_TOKEN: &str = "<num>";

/// Splits a sentence into word tokens.
///
/// Whitespace separates chunks; leading and trailing non-alphanumeric
/// characters of a chunk become single-character tokens of their own.
pub fn tokenize(text: &str, config: &TokenizerConfig) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let start = chars.iter().position(|c| c.is_alphanumeric()).unwrap_or(chars.len());
        let end = chars.iter().rposition(|c| c.is_alphanumeric()).map_or(start, |e| e + 1);
        tokens.extend(chars[..start].iter().map(|c| c.to_string()));
        if start < end {
            tokens.push(normalize_core(&chars[start..end], config));
        }
        tokens.extend(chars[end.max(start)..].iter().map(|c| c.to_string()));
    }
    if tokens.is_empty() {
        return Err(Error::EmptySentence);
    }
    Ok(tokens)
}

fn normalize_core(chars: &[char], config: &TokenizerConfig) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if config.collapse_digits && c.is_ascii_digit() {
            let mut j = i + 1;
            while j < chars.len() {
                if chars[j].is_ascii_digit() {
                    j += 1;
                } else if matches!(chars[j], '.' | ',') && chars.get(j + 1).is_some_and(|d| d.is_ascii_digit()) {
                    j += 2;
                } else {
                    break;
                }
            }
            out.push_str(NUM_TOKEN);
            i = j;
            continue;
        }
        if config.lowercase {
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
        i += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    /// Original text, kept so predictions can be written back verbatim.
    pub text: String,
    pub tokens: Vec<String>,
    pub label: Option<Label>,
}

impl Sentence {
    pub fn new(text: &str, label: Option<Label>, config: &TokenizerConfig) -> Result<Self> {
        Ok(Self {
            text: text.to_string(),
            tokens: tokenize(text, config)?,
            label,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Abstract {
    pub id: String,
    pub sentences: Vec<Sentence>,
}

impl Abstract {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.sentences.iter().all(|s| s.label.is_some())
    }

    /// Gold label indices; a validation error if any sentence is unlabeled.
    pub fn gold(&self) -> Result<Vec<usize>> {
        self.sentences
            .iter()
            .map(|s| {
                s.label
                    .map(Label::index)
                    .ok_or_else(|| Error::Validation(alloc::format!("abstract {} has an unlabeled sentence", self.id)))
            })
            .collect()
    }
}

/// Whether sentence lines must carry a label prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelPolicy {
    Required,
    Optional,
}

fn split_tag(line: &str) -> (Option<&str>, &str) {
    if let Some((head, rest)) = line.split_once('|') {
        if (1..=3).contains(&head.len()) && head.chars().all(|c| c.is_ascii_alphabetic()) {
            return (Some(head), rest);
        }
    }
    (None, line)
}

/// Parses the line-delimited dataset format.
pub fn parse_dataset(input: &str, policy: LabelPolicy, tokenizer: &TokenizerConfig) -> Result<Vec<Abstract>> {
    let mut out: Vec<Abstract> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut current: Option<(Abstract, usize)> = None;

    fn close(current: &mut Option<(Abstract, usize)>, out: &mut Vec<Abstract>) -> Result<()> {
        if let Some((abs, line)) = current.take() {
            if abs.sentences.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: alloc::format!("abstract {} has no sentences", abs.id),
                });
            }
            out.push(abs);
        }
        Ok(())
    }

    for (idx, raw) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            close(&mut current, &mut out)?;
            continue;
        }
        if let Some(id) = line.strip_prefix("###") {
            close(&mut current, &mut out)?;
            let id = id.trim();
            if id.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty abstract id".into(),
                });
            }
            if !seen.insert(id.to_string()) {
                return Err(Error::Parse {
                    line: line_no,
                    message: alloc::format!("duplicate abstract id {id}"),
                });
            }
            current = Some((
                Abstract {
                    id: id.to_string(),
                    sentences: Vec::new(),
                },
                line_no,
            ));
            continue;
        }
        let Some((abs, _)) = current.as_mut() else {
            return Err(Error::Parse {
                line: line_no,
                message: "sentence outside of an abstract (missing ###<id> header)".into(),
            });
        };
        let (tag, text) = split_tag(line);
        let label = match tag {
            Some(t) => Some(t.parse::<Label>().map_err(|_| Error::Parse {
                line: line_no,
                message: alloc::format!("unknown label tag {t:?}"),
            })?),
            None if policy == LabelPolicy::Required => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "missing <LABEL>| prefix".into(),
                })
            }
            None => None,
        };
        let sentence = Sentence::new(text, label, tokenizer).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        abs.sentences.push(sentence);
    }
    close(&mut current, &mut out)?;
    Ok(out)
}

/// Writes abstracts in the dataset format; labels are written when present.
pub fn serialize_dataset(abstracts: &[Abstract]) -> String {
    let mut out = String::new();
    for (i, abs) in abstracts.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str("###");
        out.push_str(&abs.id);
        out.push('\n');
        for s in &abs.sentences {
            if let Some(l) = s.label {
                out.push(l.tag());
                out.push('|');
            }
            out.push_str(&s.text);
            out.push('\n');
        }
    }
    out
}

/// Assignment of whole abstracts to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = alloc::vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Abstracts of `dataset` in fold `fold`, in dataset order.
    pub fn select<'a>(&self, dataset: &'a [Abstract], fold: usize) -> Vec<&'a Abstract> {
        dataset.iter().filter(|a| self.fold_of(&a.id) == Some(fold)).collect()
    }
}

/// Shuffles the sorted ids with a seeded generator and deals them round-robin.
pub fn split_folds(abstracts: &[Abstract], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(alloc::format!("need at least 2 folds, got {k}")));
    }
    if k > abstracts.len() {
        return Err(Error::Config(alloc::format!(
            "{k} folds requested for {} abstracts",
            abstracts.len()
        )));
    }
    let mut ids: Vec<&str> = abstracts.iter().map(|a| a.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != abstracts.len() {
        return Err(Error::Validation("duplicate abstract ids".into()));
    }
    ids.shuffle(&mut seeded(seed));
    let assignments = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldSplit { k, assignments })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub abstracts: usize,
    pub sentences: usize,
    /// Sentences carrying each label, indexed by [`Label::index`].
    pub sentence_counts: [usize; NUM_LABELS],
    /// Abstracts with at least one sentence of each label.
    pub abstract_counts: [usize; NUM_LABELS],
}

impl DatasetStats {
    pub fn abstracts_with(&self, label: Label) -> usize {
        self.abstract_counts[label.index()]
    }

    pub fn sentences_with(&self, label: Label) -> usize {
        self.sentence_counts[label.index()]
    }
}

pub fn dataset_stats(abstracts: &[Abstract]) -> Result<DatasetStats> {
    let mut stats = DatasetStats {
        abstracts: abstracts.len(),
        ..DatasetStats::default()
    };
    for abs in abstracts {
        let mut present = [false; NUM_LABELS];
        for y in abs.gold()? {
            stats.sentence_counts[y] += 1;
            present[y] = true;
        }
        stats.sentences += abs.sentences.len();
        for (c, p) in stats.abstract_counts.iter_mut().zip(present) {
            *c += usize::from(p);
        }
    }
    Ok(stats)
}
