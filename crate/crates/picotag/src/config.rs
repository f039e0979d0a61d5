//! Plain-text run configuration: `section.key = value` lines, `#` comments,
//! overridable by `--set key=value` (last writer wins).

use std::fmt::Write;
use std::path::PathBuf;

use picotag_core::corpus::TokenizerConfig;
use picotag_core::embeddings::DEFAULT_MIN_COUNT;
use picotag_core::hash::Fingerprint;
use picotag_core::model::ModelConfig;
use picotag_core::trainer::{CrossValConfig, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub min_count: u64,
    pub tokenizer: TokenizerConfig,
    pub embed_dim: usize,
    pub word_hidden: usize,
    pub sentence_hidden: usize,
    /// `None` means `2 * word_hidden`.
    pub attention_dim: Option<usize>,
    pub contextualize: bool,
    pub folds: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            dataset: None,
            embeddings: None,
            output: None,
            min_count: DEFAULT_MIN_COUNT,
            tokenizer: TokenizerConfig::default(),
            embed_dim: model.embed_dim,
            word_hidden: model.word_hidden,
            sentence_hidden: model.sentence_hidden,
            attention_dim: None,
            contextualize: true,
            folds: 10,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::usage(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CliError::usage(format!("config line {}: {}", i + 1, e.message)))?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` assignment.
    pub fn set_pair(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {assignment:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        let p = &mut t.perturb;
        match key {
            "data.dataset" => self.dataset = Some(value.into()),
            "data.embeddings" => self.embeddings = Some(value.into()),
            "data.output" => self.output = Some(value.into()),
            "data.min_count" => self.min_count = parse(key, value)?,
            "data.lowercase" => self.tokenizer.lowercase = parse(key, value)?,
            "data.collapse_digits" => self.tokenizer.collapse_digits = parse(key, value)?,
            "model.embed_dim" => self.embed_dim = parse(key, value)?,
            "model.word_hidden" => self.word_hidden = parse(key, value)?,
            "model.sentence_hidden" => self.sentence_hidden = parse(key, value)?,
            "model.attention_dim" => {
                self.attention_dim = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "model.contextualize" => self.contextualize = parse(key, value)?,
            "crossval.folds" => self.folds = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.adam_epsilon" => t.adam_epsilon = parse(key, value)?,
            "train.l2_coefficient" => t.l2_coefficient = parse(key, value)?,
            "train.dropout_rate" => t.dropout_rate = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.max_epochs" => t.max_epochs = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.clip_norm" => t.clip_norm = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "perturb.epsilon_adv" => p.epsilon_adv = parse(key, value)?,
            "perturb.epsilon_vat" => p.epsilon_vat = parse(key, value)?,
            "perturb.xi" => p.xi = parse(key, value)?,
            "perturb.lambda_adv" => p.lambda_adv = parse(key, value)?,
            "perturb.lambda_vat" => p.lambda_vat = parse(key, value)?,
            _ => return Err(CliError::usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key in canonical order; [`RunConfig::parse`] inverts it exactly.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let t = &self.train;
        let p = &t.perturb;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        for (k, v) in [
            ("data.dataset", path(&self.dataset)),
            ("data.embeddings", path(&self.embeddings)),
            ("data.output", path(&self.output)),
        ] {
            if let Some(v) = v {
                put(k, v);
            }
        }
        put("data.min_count", self.min_count.to_string());
        put("data.lowercase", self.tokenizer.lowercase.to_string());
        put("data.collapse_digits", self.tokenizer.collapse_digits.to_string());
        put("model.embed_dim", self.embed_dim.to_string());
        put("model.word_hidden", self.word_hidden.to_string());
        put("model.sentence_hidden", self.sentence_hidden.to_string());
        put("model.attention_dim", self.attention_dim.map_or("auto".into(), |a| a.to_string()));
        put("model.contextualize", self.contextualize.to_string());
        put("crossval.folds", self.folds.to_string());
        put("train.learning_rate", format!("{:?}", t.learning_rate));
        put("train.beta1", format!("{:?}", t.beta1));
        put("train.beta2", format!("{:?}", t.beta2));
        put("train.adam_epsilon", format!("{:?}", t.adam_epsilon));
        put("train.l2_coefficient", format!("{:?}", t.l2_coefficient));
        put("train.dropout_rate", format!("{:?}", t.dropout_rate));
        put("train.batch_size", t.batch_size.to_string());
        put("train.max_epochs", t.max_epochs.to_string());
        put("train.patience", t.patience.to_string());
        put("train.clip_norm", format!("{:?}", t.clip_norm));
        put("train.seed", t.seed.to_string());
        put("perturb.epsilon_adv", format!("{:?}", p.epsilon_adv));
        put("perturb.epsilon_vat", format!("{:?}", p.epsilon_vat));
        put("perturb.xi", format!("{:?}", p.xi));
        put("perturb.lambda_adv", format!("{:?}", p.lambda_adv));
        put("perturb.lambda_vat", format!("{:?}", p.lambda_vat));
        s
    }

    pub fn model(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.embed_dim, self.word_hidden, self.sentence_hidden);
        if let Some(a) = self.attention_dim {
            m.attention_dim = a;
        }
        m.contextualize = self.contextualize;
        m
    }

    pub fn crossval(&self) -> CrossValConfig {
        CrossValConfig {
            k: self.folds,
            min_count: self.min_count,
            model: self.model(),
            train: self.train.clone(),
        }
    }

    /// Hash of everything a checkpoint must agree on to be reused.
    pub fn compatibility_hash(model: &ModelConfig, tokenizer: &TokenizerConfig) -> u64 {
        let mut fp = Fingerprint::new();
        fp.u64(model.fingerprint())
            .u64(u64::from(tokenizer.lowercase))
            .u64(u64::from(tokenizer.collapse_digits));
        fp.finish()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model().validate()?;
        self.train.validate()?;
        if self.folds < 2 {
            return Err(CliError::usage("crossval.folds must be at least 2"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_overrides() {
        let mut cfg = RunConfig::parse("# run\nmodel.word_hidden = 8\n\ndata.dataset = a.txt # inline\n").unwrap();
        assert_eq!(cfg.word_hidden, 8);
        assert_eq!(cfg.model().attention_dim, 16);
        cfg.set_pair("perturb.lambda_adv=0").unwrap();
        cfg.set_pair("perturb.lambda_adv = 0.25").unwrap();
        cfg.set_pair("train.learning_rate=0.1").unwrap();
        assert_eq!(cfg.train.perturb.lambda_adv, 0.25);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_input() {
        assert!(RunConfig::parse("nonsense").is_err());
        assert!(RunConfig::parse("model.nothing = 1").is_err());
        let err = RunConfig::parse("\ntrain.batch_size = many").unwrap_err();
        assert!(err.message.contains("line 2"));
        assert_eq!(err.exit_code(), 1);
    }
}
