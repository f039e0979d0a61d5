//! Mini-batch training with early stopping on development P/I/O F1, and the
//! k-fold cross-validation protocol.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::adversarial::{self, combined_loss_grads, Example, LossComponents, PerturbConfig};
use crate::corpus::{split_folds, Abstract, FoldSplit};
use crate::embeddings::{build_vocab, normalize_embeddings, Coverage, EmbeddingSource, EmbeddingTable, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{score_predictions, ConfusionCounts, CrossValReport, MetricsReport};
use crate::hash::Fingerprint;
use crate::model::{embed_abstract, predict_embedded, DropoutMasks, EmbeddedInput, ModelConfig, ModelParams};
use crate::numeric::rng::substream;
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub l2_coefficient: f64,
    pub dropout_rate: f64,
    /// Abstracts per mini-batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub perturb: PerturbConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            l2_coefficient: 1e-4,
            dropout_rate: 0.5,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            clip_norm: 5.0,
            seed: 0,
            perturb: PerturbConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            l2: self.l2_coefficient,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.perturb.validate()?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's mini-batches, weighted by batch size.
    pub losses: LossComponents,
    /// Clean negative log-likelihood per abstract, evaluation mode.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_pio_f1: f64,
    pub dev_accuracy: f64,
    pub improved: bool,
}

impl EpochRecord {
    /// Dev minus train loss.
    pub fn generalization_gap(&self) -> f64 {
        self.dev_loss - self.train_loss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub dev_metric: f64,
    pub checksum: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: CheckpointRecord,
    /// Parameters at the best epoch.
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.log[self.best.epoch - 1]
    }
}

/// An abstract embedded once with the fold's frozen table.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub input: EmbeddedInput,
    pub gold: Vec<usize>,
}

pub fn prepare<'a, I>(abstracts: I, vocab: &Vocab, table: &EmbeddingTable) -> Result<Vec<Prepared>>
where
    I: IntoIterator<Item = &'a Abstract>,
{
    abstracts
        .into_iter()
        .map(|a| {
            Ok(Prepared {
                input: embed_abstract(a, vocab, table)?,
                gold: a.gold()?,
            })
        })
        .collect()
}

/// Evaluation-mode counts and mean clean negative log-likelihood.
pub fn evaluate(params: &ModelParams, data: &[Prepared]) -> Result<(ConfusionCounts, f64)> {
    let mut predicted = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for p in data {
        predicted.push(predict_embedded(params, &p.input)?);
        loss += adversarial::nll(params, &p.input, &p.gold, None)?;
    }
    let gold: Vec<&[usize]> = data.iter().map(|p| p.gold.as_slice()).collect();
    let counts = score_predictions(&gold, &predicted)?;
    Ok((counts, loss / data.len().max(1) as f64))
}

/// Trains from a seeded initialization until `patience` epochs pass without
/// a dev improvement (ties keep the earlier epoch) or `max_epochs` is hit.
pub fn train_fold(
    train: &[Prepared],
    dev: &[Prepared],
    model: &ModelConfig,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("training and development sets must be non-empty".into()));
    }
    config.validate()?;
    let mut params = ModelParams::initialized(model, config.seed)?;
    let mut state = AdamState::new(&params.tensors());
    let adam = config.adam();
    let mut order_rng = substream(config.seed, 1);
    let mut noise_rng = substream(config.seed, 2);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best: Option<(CheckpointRecord, ModelParams)> = None;
    let mut stale = 0;
    let mut log = Vec::new();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut order_rng);
        let mut sums = LossComponents::default();
        for batch in order.chunks(config.batch_size) {
            let masks: Vec<Option<DropoutMasks>> = batch
                .iter()
                .map(|&i| {
                    (config.dropout_rate > 0.0)
                        .then(|| DropoutMasks::sample(model, &train[i].input, config.dropout_rate, &mut noise_rng))
                        .transpose()
                })
                .collect::<Result<_>>()?;
            let examples: Vec<Example<'_, DropoutMasks>> = batch
                .iter()
                .zip(&masks)
                .map(|(&i, m)| Example {
                    input: &train[i].input,
                    gold: &train[i].gold,
                    noise: m.as_ref(),
                })
                .collect();
            let (parts, mut grads) = combined_loss_grads(&params, &examples, &config.perturb, &mut noise_rng)?;
            let w = batch.len() as f64;
            sums.classification += w * parts.classification;
            sums.adversarial += w * parts.adversarial;
            sums.virtual_adversarial += w * parts.virtual_adversarial;
            sums.total += w * parts.total;
            clip_global_norm(&mut grads.tensors_mut(), config.clip_norm);
            let g = grads.tensors();
            adam_step(&mut params.tensors_mut(), &g, &mut state, &adam)?;
        }
        let n = train.len() as f64;
        let losses = LossComponents {
            classification: sums.classification / n,
            adversarial: sums.adversarial / n,
            virtual_adversarial: sums.virtual_adversarial / n,
            total: sums.total / n,
        };
        if params.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameters diverged in epoch {epoch}")));
        }
        let (_, train_loss) = evaluate(&params, train)?;
        let (counts, dev_loss) = evaluate(&params, dev)?;
        let dev_pio_f1 = MetricsReport::from_counts(counts).pio_f1();
        let improved = best.as_ref().is_none_or(|(b, _)| dev_pio_f1 > b.dev_metric);
        let record = EpochRecord {
            epoch,
            losses,
            train_loss,
            dev_loss,
            dev_pio_f1,
            dev_accuracy: counts.accuracy(),
            improved,
        };
        observer(&record);
        log.push(record);
        if improved {
            let cp = CheckpointRecord {
                epoch,
                dev_metric: dev_pio_f1,
                checksum: params.fingerprint(),
            };
            best = Some((cp, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                break;
            }
        }
    }
    let (best, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { best, params, log })
}

/// Test, development and training abstracts of one fold: test is fold `i`,
/// dev is fold `i + 1 (mod k)`, train is the rest.
#[derive(Debug, Clone)]
pub struct FoldData<'a> {
    pub index: usize,
    pub train: Vec<&'a Abstract>,
    pub dev: Vec<&'a Abstract>,
    pub test: Vec<&'a Abstract>,
}

pub fn fold_data<'a>(dataset: &'a [Abstract], split: &FoldSplit, index: usize) -> Result<FoldData<'a>> {
    if index >= split.k {
        return Err(Error::Config(format!("fold {index} of {}", split.k)));
    }
    let dev_fold = (index + 1) % split.k;
    let mut data = FoldData {
        index,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for a in dataset {
        let f = split
            .fold_of(&a.id)
            .ok_or_else(|| Error::Validation(format!("abstract {} missing from the split", a.id)))?;
        if f == index {
            data.test.push(a);
        } else if f == dev_fold {
            data.dev.push(a);
        } else {
            data.train.push(a);
        }
    }
    Ok(data)
}

/// Settings shared by every fold.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossValConfig {
    pub k: usize,
    pub min_count: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub index: usize,
    pub test: MetricsReport,
    pub outcome: TrainOutcome,
    pub vocab: Vocab,
    pub table: EmbeddingTable,
    pub coverage: Coverage,
}

/// Seed of fold `index` derived from the run seed.
pub fn fold_seed(seed: u64, index: usize) -> u64 {
    let mut fp = Fingerprint::new();
    fp.str("fold").u64(seed).u64(index as u64);
    fp.finish()
}

/// Vocabulary and normalized table from the training abstracts only.
pub fn fit_embeddings<S: EmbeddingSource + ?Sized>(
    train: &[&Abstract],
    source: &S,
    min_count: u64,
    seed: u64,
) -> Result<(Vocab, EmbeddingTable, Coverage)> {
    let vocab = build_vocab(train.iter().copied(), min_count)?;
    let (raw, coverage) = EmbeddingTable::from_source(&vocab, source, seed)?;
    let (table, _) = normalize_embeddings(&raw, &vocab)?;
    Ok((vocab, table, coverage))
}

/// Trains and tests one fold. Independent of every other fold.
pub fn run_fold<S: EmbeddingSource + ?Sized>(
    fold: &FoldData<'_>,
    source: &S,
    config: &CrossValConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<FoldResult> {
    let seed = fold_seed(config.train.seed, fold.index);
    let (vocab, table, coverage) = fit_embeddings(&fold.train, source, config.min_count, seed)?;
    let train = prepare(fold.train.iter().copied(), &vocab, &table)?;
    let dev = prepare(fold.dev.iter().copied(), &vocab, &table)?;
    let test = prepare(fold.test.iter().copied(), &vocab, &table)?;
    let fold_config = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let outcome = train_fold(&train, &dev, &config.model, &fold_config, observer)?;
    let (counts, _) = evaluate(&outcome.params, &test)?;
    Ok(FoldResult {
        index: fold.index,
        test: MetricsReport::from_counts(counts),
        outcome,
        vocab,
        table,
        coverage,
    })
}

/// Every fold in order, then the mean and pooled reports.
pub fn cross_validate<S: EmbeddingSource + ?Sized>(
    dataset: &[Abstract],
    source: &S,
    config: &CrossValConfig,
    observer: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<(CrossValReport, Vec<FoldResult>)> {
    let split = split_folds(dataset, config.k, config.train.seed)?;
    let mut results = Vec::with_capacity(config.k);
    for i in 0..config.k {
        let fold = fold_data(dataset, &split, i)?;
        results.push(run_fold(&fold, source, config, &mut |r| observer(i, r))?);
    }
    let report = CrossValReport::new(results.iter().map(|r| r.test.clone()).collect())?;
    Ok((report, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{self, SyntheticConfig};

    fn tiny_model() -> ModelConfig {
        let mut c = ModelConfig::new(8, 6, 6);
        c.attention_dim = 6;
        c
    }

    fn corpus(n: usize, seed: u64) -> (Vec<Abstract>, alloc::collections::BTreeMap<alloc::string::String, Vec<f64>>) {
        let cfg = SyntheticConfig {
            abstracts: n,
            seed,
            ..SyntheticConfig::default()
        };
        (synthetic::generate(&cfg).unwrap().0, synthetic::embeddings(&cfg, 8, seed))
    }

    fn prepared(n: usize) -> (Vec<Prepared>, EmbeddingTable) {
        let (data, source) = corpus(n, 3);
        let refs: Vec<&Abstract> = data.iter().collect();
        let (vocab, table, _) = fit_embeddings(&refs, &source, 1, 0).unwrap();
        (prepare(&data, &vocab, &table).unwrap(), table)
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            dropout_rate: 0.0,
            batch_size: 4,
            max_epochs: 3,
            seed,
            perturb: PerturbConfig::baseline(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn patience_zero_stops_at_first_non_improvement() {
        let (data, _) = prepared(12);
        let (train, dev) = data.split_at(8);
        for seed in 0..4 {
            let cfg = TrainConfig { patience: 0, ..quick(seed) };
            let out = train_fold(train, dev, &tiny_model(), &cfg, &mut |_| {}).unwrap();
            let first_stale = out.log.iter().position(|r| !r.improved);
            let expected = first_stale.map_or(3, |i| (i + 1).min(3));
            assert_eq!(out.log.len(), expected);
            assert_eq!(out.best.epoch, out.log.iter().rposition(|r| r.improved).unwrap() + 1);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (data, table) = prepared(10);
        let before = table.fingerprint();
        let (train, dev) = data.split_at(7);
        let cfg = TrainConfig {
            dropout_rate: 0.3,
            perturb: PerturbConfig::default(),
            ..quick(5)
        };
        let a = train_fold(train, dev, &tiny_model(), &cfg, &mut |_| {}).unwrap();
        let b = train_fold(train, dev, &tiny_model(), &cfg, &mut |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best, b.best);
        assert_eq!(table.fingerprint(), before);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let (data, _) = prepared(3);
        let err = train_fold(&data, &[], &tiny_model(), &quick(0), &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn loss_decreases_on_a_small_set() {
        let (data, _) = prepared(20);
        let cfg = TrainConfig {
            learning_rate: 0.005,
            max_epochs: 11,
            patience: 100,
            ..quick(1)
        };
        let out = train_fold(&data, &data[..4], &tiny_model(), &cfg, &mut |_| {}).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|r| r.train_loss).collect();
        let drops = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(drops >= 8, "{losses:?}");
    }

    #[test]
    fn folds_partition_and_rotate_dev() {
        let (data, _) = corpus(20, 1);
        let split = split_folds(&data, 10, 4).unwrap();
        let mut tested = alloc::collections::BTreeSet::new();
        for i in 0..10 {
            let f = fold_data(&data, &split, i).unwrap();
            assert_eq!((f.train.len(), f.dev.len(), f.test.len()), (16, 2, 2));
            let dev_fold = split.fold_of(&f.dev[0].id).unwrap();
            assert_eq!(dev_fold, (i + 1) % 10);
            for a in &f.test {
                assert!(tested.insert(a.id.clone()));
                assert!(!f.train.iter().chain(&f.dev).any(|b| b.id == a.id));
            }
        }
        assert_eq!(tested.len(), 20);
    }

    #[test]
    fn test_fold_content_does_not_leak() {
        let (data, source) = corpus(12, 2);
        let split = split_folds(&data, 3, 0).unwrap();
        let fold = fold_data(&data, &split, 0).unwrap();
        let mut altered = data.clone();
        for a in altered.iter_mut().filter(|a| split.fold_of(&a.id) == Some(0)) {
            a.sentences[0].tokens.push("unseenword".into());
        }
        let fold2 = fold_data(&altered, &split, 0).unwrap();
        let cfg = CrossValConfig {
            k: 3,
            min_count: 1,
            model: tiny_model(),
            train: quick(1),
        };
        let a = run_fold(&fold, &source, &cfg, &mut |_| {}).unwrap();
        let b = run_fold(&fold2, &source, &cfg, &mut |_| {}).unwrap();
        assert_eq!(a.vocab, b.vocab);
        assert_eq!(a.outcome.best, b.outcome.best);
    }

    #[test]
    fn cross_validation_means() {
        let (data, source) = corpus(12, 7);
        let cfg = CrossValConfig {
            k: 3,
            min_count: 1,
            model: tiny_model(),
            train: TrainConfig { max_epochs: 2, ..quick(9) },
        };
        let (report, folds) = cross_validate(&data, &source, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(folds.len(), 3);
        for l in 0..crate::corpus::NUM_LABELS {
            let mean = folds.iter().map(|f| f.test.labels[l].f1).sum::<f64>() / 3.0;
            assert!((report.mean.labels[l].f1 - mean).abs() < 1e-12);
        }
        let pooled = report.pooled.counts.unwrap();
        assert_eq!(pooled.sentences as usize, data.iter().map(|a| a.len()).sum::<usize>());
    }
}
