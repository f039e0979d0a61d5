//! The workflows behind each subcommand. Every function reads its inputs,
//! never modifies them, and writes only below the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use picotag_core::corpus::{dataset_stats, parse_dataset, serialize_dataset, split_folds, Abstract, DatasetStats, Label, LabelPolicy, TokenizerConfig};
use picotag_core::embeddings::{normalize_embeddings, EmbeddingSource, EmbeddingTable};
use picotag_core::evaluation::{export_metrics, render_report, score_predictions, CrossValReport, MetricsReport};
use picotag_core::model::{embed_abstract, predict_embedded};
use picotag_core::synthetic::{self, SyntheticConfig};
use picotag_core::trainer::{fit_embeddings, fold_data, fold_seed, prepare, run_fold, train_fold, EpochRecord, FoldData, FoldResult};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::word2vec::{self, WordVectors};

pub fn read_dataset(path: &Path, policy: LabelPolicy, tokenizer: &TokenizerConfig) -> Result<Vec<Abstract>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_dataset(&text, policy, tokenizer).map_err(|e| CliError::from(e).in_file(path))
}

pub fn render_stats(stats: &DatasetStats) -> String {
    let mut s = format!("abstracts: {}\nsentences: {}\n", stats.abstracts, stats.sentences);
    let _ = writeln!(s, "{:<14}{:>10}{:>11}", "label", "sentences", "abstracts");
    for l in Label::ALL {
        let _ = writeln!(s, "{:<14}{:>10}{:>11}", format!("{l:?}"), stats.sentences_with(l), stats.abstracts_with(l));
    }
    s
}

/// Parses a labeled dataset and returns its statistics.
pub fn cmd_validate(path: &Path) -> Result<DatasetStats, CliError> {
    let data = read_dataset(path, LabelPolicy::Required, &TokenizerConfig::default())?;
    Ok(dataset_stats(&data)?)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::usage(format!("{key} is not set (config key or command-line flag)")))
}

fn load_embeddings(path: &Path, cfg: &RunConfig) -> Result<WordVectors, CliError> {
    let vectors = word2vec::load(path)?;
    if vectors.dim() != cfg.embed_dim {
        return Err(CliError::usage(format!(
            "{}: vectors have dimension {}, model.embed_dim is {}",
            path.display(),
            vectors.dim(),
            cfg.embed_dim
        )));
    }
    Ok(vectors)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// One JSON line of the training log.
#[derive(Debug, Serialize)]
pub struct LogLine {
    pub fold: Option<usize>,
    pub epoch: usize,
    pub l_cls: f64,
    pub l_adv: f64,
    pub l_vat: f64,
    pub l_total: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_pio_f1: f64,
    pub dev_accuracy: f64,
    pub improved: bool,
    pub wall_seconds: f64,
}

impl LogLine {
    fn new(fold: Option<usize>, r: &EpochRecord, start: Instant) -> Self {
        Self {
            fold,
            epoch: r.epoch,
            l_cls: r.losses.classification,
            l_adv: r.losses.adversarial,
            l_vat: r.losses.virtual_adversarial,
            l_total: r.losses.total,
            train_loss: r.train_loss,
            dev_loss: r.dev_loss,
            dev_pio_f1: r.dev_pio_f1,
            dev_accuracy: r.dev_accuracy,
            improved: r.improved,
            wall_seconds: start.elapsed().as_secs_f64(),
        }
    }

    fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log lines serialize")
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub output: PathBuf,
    pub best_epoch: usize,
    pub epochs: usize,
    pub dev: MetricsReport,
}

fn checkpoint_for(params: picotag_core::model::ModelParams, cfg: &RunConfig, vocab: picotag_core::embeddings::Vocab, table: &EmbeddingTable, source: &WordVectors, seed: u64) -> Checkpoint {
    Checkpoint {
        params,
        tokenizer: cfg.tokenizer.clone(),
        vocab,
        embedding_hash: table.fingerprint(),
        source_hash: word2vec::checksum(source),
        embedding_seed: seed,
    }
}

/// Trains one model with fold 0 of the `crossval.folds` split as the
/// development set and every other abstract as training data.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let out = required(&cfg.output, "data.output")?.to_path_buf();
    let data = read_dataset(required(&cfg.dataset, "data.dataset")?, LabelPolicy::Required, &cfg.tokenizer)?;
    let source = load_embeddings(required(&cfg.embeddings, "data.embeddings")?, cfg)?;
    let split = split_folds(&data, cfg.folds, cfg.train.seed)?;
    let dev: Vec<&Abstract> = split.select(&data, 0);
    let train: Vec<&Abstract> = data.iter().filter(|a| split.fold_of(&a.id) != Some(0)).collect();
    let seed = cfg.train.seed;
    let (vocab, table, _) = fit_embeddings(&train, &source, cfg.min_count, seed)?;
    let train_set = prepare(train.iter().copied(), &vocab, &table)?;
    let dev_set = prepare(dev.iter().copied(), &vocab, &table)?;

    create_dir(&out)?;
    write(&out.join("run.cfg"), cfg.to_text())?;
    let start = Instant::now();
    let mut log = String::new();
    let outcome = train_fold(&train_set, &dev_set, &cfg.model(), &cfg.train, &mut |r| {
        log.push_str(&LogLine::new(None, r, start).to_json());
        log.push('\n');
    })?;
    write(&out.join("train_log.jsonl"), &log)?;
    let (counts, _) = picotag_core::trainer::evaluate(&outcome.params, &dev_set)?;
    let report = MetricsReport::from_counts(counts);
    write(&out.join("metrics.tsv"), export_metrics(&[("dev".into(), report.clone())]))?;
    write(&out.join("report.txt"), render_report(&report))?;
    checkpoint_for(outcome.params.clone(), cfg, vocab, &table, &source, seed).save(&out.join("checkpoint.bin"))?;
    Ok(TrainSummary {
        output: out,
        best_epoch: outcome.best.epoch,
        epochs: outcome.log.len(),
        dev: report,
    })
}

/// Runs every fold, at most `jobs` at a time, and writes per-fold
/// checkpoints, the training log, the metrics export and the report.
pub fn cmd_crossval(cfg: &RunConfig, jobs: usize) -> Result<CrossValReport, CliError> {
    cfg.validate()?;
    let out = required(&cfg.output, "data.output")?.to_path_buf();
    let data = read_dataset(required(&cfg.dataset, "data.dataset")?, LabelPolicy::Required, &cfg.tokenizer)?;
    let source = load_embeddings(required(&cfg.embeddings, "data.embeddings")?, cfg)?;
    let cv = cfg.crossval();
    let split = split_folds(&data, cv.k, cv.train.seed)?;
    let folds: Vec<FoldData<'_>> = (0..cv.k).map(|i| fold_data(&data, &split, i)).collect::<Result<_, _>>()?;
    create_dir(&out)?;
    write(&out.join("run.cfg"), cfg.to_text())?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<(FoldResult, String), CliError>>>> = Mutex::new((0..cv.k).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cv.k) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cv.k {
                    break;
                }
                let start = Instant::now();
                let mut log = String::new();
                let result = run_fold(&folds[i], &source, &cv, &mut |r| {
                    log.push_str(&LogLine::new(Some(i), r, start).to_json());
                    log.push('\n');
                })
                .map(|r| (r, log))
                .map_err(CliError::from);
                slots.lock().expect("no panics while holding the lock")[i] = Some(result);
            });
        }
    });

    let mut log = String::new();
    let mut reports = Vec::with_capacity(cv.k);
    for (i, slot) in slots.into_inner().expect("threads joined").into_iter().enumerate() {
        let (fold, fold_log) = slot.expect("every fold ran")?;
        log.push_str(&fold_log);
        let dir = out.join(format!("fold{i}"));
        create_dir(&dir)?;
        let seed = fold_seed(cv.train.seed, i);
        checkpoint_for(fold.outcome.params.clone(), cfg, fold.vocab.clone(), &fold.table, &source, seed).save(&dir.join("checkpoint.bin"))?;
        reports.push(fold.test);
    }
    let report = CrossValReport::new(reports)?;
    write(&out.join("train_log.jsonl"), &log)?;
    write(&out.join("metrics.tsv"), export_metrics(&report.entries()))?;
    let mut text = String::new();
    for (i, f) in report.folds.iter().enumerate() {
        let _ = writeln!(text, "fold {i}\n{}", render_report(f));
    }
    let _ = writeln!(text, "mean over {} folds\n{}", report.folds.len(), render_report(&report.mean));
    let _ = writeln!(text, "pooled counts\n{}", render_report(&report.pooled));
    write(&out.join("report.txt"), &text)?;
    Ok(report)
}

/// Checkpoint together with the embedding table it was trained with,
/// rebuilt from the word-vector file.
pub fn load_model(checkpoint: &Path, embeddings: &Path) -> Result<(Checkpoint, EmbeddingTable), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let source = word2vec::load(embeddings)?;
    let incompatible = |what: &str| {
        CliError::data(format!(
            "{} is incompatible with checkpoint {}: {what} differs",
            embeddings.display(),
            checkpoint.display()
        ))
    };
    if word2vec::checksum(&source) != ck.source_hash {
        return Err(incompatible("word-vector checksum"));
    }
    let (raw, _) = EmbeddingTable::from_source(&ck.vocab, &source, ck.embedding_seed).map_err(|_| incompatible("dimension"))?;
    let (table, _) = normalize_embeddings(&raw, &ck.vocab)?;
    if table.fingerprint() != ck.embedding_hash {
        return Err(incompatible("vocabulary/embedding hash"));
    }
    Ok((ck, table))
}

fn predict_all(ck: &Checkpoint, table: &EmbeddingTable, data: &[Abstract]) -> Result<Vec<Vec<usize>>, CliError> {
    data.iter()
        .map(|a| {
            let input = embed_abstract(a, &ck.vocab, table)?;
            Ok(predict_embedded(&ck.params, &input)?)
        })
        .collect()
}

/// Scores a checkpoint on a labeled dataset.
pub fn cmd_evaluate(checkpoint: &Path, embeddings: &Path, dataset: &Path) -> Result<MetricsReport, CliError> {
    let (ck, table) = load_model(checkpoint, embeddings)?;
    let data = read_dataset(dataset, LabelPolicy::Required, &ck.tokenizer)?;
    let predicted = predict_all(&ck, &table, &data)?;
    let gold = data.iter().map(|a| a.gold()).collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsReport::from_counts(score_predictions(&gold, &predicted)?))
}

/// Labels every sentence of `input` (labels optional) and returns the
/// dataset text with the predicted labels.
pub fn cmd_predict(checkpoint: &Path, embeddings: &Path, input: &Path) -> Result<String, CliError> {
    let (ck, table) = load_model(checkpoint, embeddings)?;
    let mut data = read_dataset(input, LabelPolicy::Optional, &ck.tokenizer)?;
    let predicted = predict_all(&ck, &table, &data)?;
    for (a, labels) in data.iter_mut().zip(predicted) {
        for (s, l) in a.sentences.iter_mut().zip(labels) {
            s.label = Label::from_index(l);
        }
    }
    Ok(serialize_dataset(&data))
}

/// Writes a synthetic dataset (`dataset.txt`) and matching word vectors
/// (`vectors.txt`, or `vectors.bin` when `binary`).
pub fn cmd_synth(out: &Path, config: &SyntheticConfig, dim: usize, binary: bool) -> Result<(PathBuf, PathBuf), CliError> {
    let (data, _) = synthetic::generate(config)?;
    let vectors = synthetic::embeddings(config, dim, config.seed);
    create_dir(out)?;
    let dataset = out.join("dataset.txt");
    write(&dataset, serialize_dataset(&data))?;
    let emb = out.join(if binary { "vectors.bin" } else { "vectors.txt" });
    word2vec::save(&vectors, &emb)?;
    Ok((dataset, emb))
}
