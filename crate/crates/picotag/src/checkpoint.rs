//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes  "PICOTAG\0"
//! version          u32      1
//! config hash      u64      model sizes + tokenizer settings
//! vocab hash       u64
//! embedding hash   u64      normalized table the model was trained with
//! source hash      u64      checksum of the word-vector file
//! embedding seed   u64      seed of the rows for words missing from the file
//! model            5 × u64  embed_dim, word_hidden, sentence_hidden, attention_dim, num_labels
//!                  u8       contextualize
//! tokenizer        2 × u8   lowercase, collapse_digits
//! vocab            u64 n, then n × (u32 len, UTF-8 word, u64 count)
//! tensors          u32 n, then n × (u32 len, name, u32 rank, rank × u64 dims, f64 values)
//! checksum         u64      over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use picotag_core::corpus::TokenizerConfig;
use picotag_core::embeddings::Vocab;
use picotag_core::hash::Fingerprint;
use picotag_core::model::{ModelConfig, ModelParams};
use picotag_core::Tensor;

use crate::config::RunConfig;
use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"PICOTAG\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub tokenizer: TokenizerConfig,
    pub vocab: Vocab,
    pub embedding_hash: u64,
    pub source_hash: u64,
    pub embedding_seed: u64,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut fp = Fingerprint::new();
    fp.bytes(bytes);
    fp.finish()
}

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        RunConfig::compatibility_hash(self.params.config(), &self.tokenizer)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let u32_ = |b: &mut Vec<u8>, v: u32| b.extend_from_slice(&v.to_le_bytes());
        let u64_ = |b: &mut Vec<u8>, v: u64| b.extend_from_slice(&v.to_le_bytes());
        b.extend_from_slice(MAGIC);
        u32_(&mut b, VERSION);
        u64_(&mut b, self.config_hash());
        u64_(&mut b, self.vocab.fingerprint());
        u64_(&mut b, self.embedding_hash);
        u64_(&mut b, self.source_hash);
        u64_(&mut b, self.embedding_seed);
        let m = self.params.config();
        for v in [m.embed_dim, m.word_hidden, m.sentence_hidden, m.attention_dim, m.num_labels] {
            u64_(&mut b, v as u64);
        }
        b.push(u8::from(m.contextualize));
        b.push(u8::from(self.tokenizer.lowercase));
        b.push(u8::from(self.tokenizer.collapse_digits));
        u64_(&mut b, self.vocab.len() as u64);
        for (w, &c) in self.vocab.words().iter().zip(self.vocab.counts()) {
            u32_(&mut b, w.len() as u32);
            b.extend_from_slice(w.as_bytes());
            u64_(&mut b, c);
        }
        let names = self.params.tensor_names();
        let tensors = self.params.tensors();
        u32_(&mut b, tensors.len() as u32);
        for (name, t) in names.iter().zip(tensors) {
            u32_(&mut b, name.len() as u32);
            b.extend_from_slice(name.as_bytes());
            u32_(&mut b, t.shape().len() as u32);
            for &d in t.shape() {
                u64_(&mut b, d as u64);
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&b);
        u64_(&mut b, sum);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
            return Err(CliError::data("not a checkpoint file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if checksum(body).to_le_bytes() != tail {
            return Err(CliError::data("checkpoint checksum mismatch (file is corrupt)"));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::data(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.u64()?;
        let vocab_hash = r.u64()?;
        let embedding_hash = r.u64()?;
        let source_hash = r.u64()?;
        let embedding_seed = r.u64()?;
        let mut sizes = [0usize; 5];
        for s in &mut sizes {
            *s = r.usize()?;
        }
        let model = ModelConfig {
            embed_dim: sizes[0],
            word_hidden: sizes[1],
            sentence_hidden: sizes[2],
            attention_dim: sizes[3],
            num_labels: sizes[4],
            contextualize: r.flag()?,
        };
        let tokenizer = TokenizerConfig {
            lowercase: r.flag()?,
            collapse_digits: r.flag()?,
        };
        let n = r.usize()?;
        let mut words = Vec::with_capacity(n.min(1 << 20));
        let mut counts = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            words.push(r.string()?);
            counts.push(r.u64()?);
        }
        let vocab = Vocab::from_counts(words, counts)?;
        if vocab.fingerprint() != vocab_hash {
            return Err(CliError::data("checkpoint vocabulary does not match its hash"));
        }
        let mut params = ModelParams::zeros(&model)?;
        let expected = params.tensor_names();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(CliError::data(format!("{count} tensors, expected {}", expected.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for name in &expected {
            let found = r.string()?;
            if &found != name {
                return Err(CliError::data(format!("tensor {found:?} where {name:?} was expected")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            tensors.push(Tensor::from_vec(&shape, data)?);
        }
        params.load_tensors(tensors)?;
        if r.pos != body.len() {
            return Err(CliError::data("trailing bytes in checkpoint"));
        }
        let ck = Self {
            params,
            tokenizer,
            vocab,
            embedding_hash,
            source_hash,
            embedding_seed,
        };
        if ck.config_hash() != config_hash {
            return Err(CliError::data("checkpoint config hash does not match its contents"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::data("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, CliError> {
        usize::try_from(self.u64()?).map_err(|_| CliError::data("size out of range"))
    }

    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self) -> Result<bool, CliError> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CliError::data(format!("invalid flag byte {b}"))),
        }
    }

    fn string(&mut self) -> Result<String, CliError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::data("string is not UTF-8"))
    }
}
