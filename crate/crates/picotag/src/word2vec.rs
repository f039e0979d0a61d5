//! word2vec text and binary embedding files.
//!
//! Both start with a `<count> <dim>` header line. Text files then hold one
//! `word v1 … vD` line per word. Binary files hold, per word, the word
//! followed by a space and `D` little-endian `f32` values (an optional
//! newline may follow each vector). Values are widened to `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use picotag_core::hash::Fingerprint;

use crate::error::CliError;

pub type WordVectors = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Binary,
}

impl Format {
    /// `.bin` files are binary, anything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => Format::Binary,
            _ => Format::Text,
        }
    }
}

fn header(line: &str) -> Result<(usize, usize), CliError> {
    let mut it = line.split_whitespace();
    let mut num = |what: &str| -> Result<usize, CliError> {
        it.next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::data(format!("line 1: header must be `<count> <dim>`, missing {what}")))
    };
    let k = num("count")?;
    let d = num("dim")?;
    if d == 0 {
        return Err(CliError::data("line 1: dimension must be positive"));
    }
    Ok((k, d))
}

fn insert(map: &mut WordVectors, word: &str, v: Vec<f64>, at: &str) -> Result<(), CliError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CliError::data(format!("{at}: non-finite value for {word:?}")));
    }
    if map.insert(word.to_string(), v).is_some() {
        return Err(CliError::data(format!("{at}: duplicate word {word:?}")));
    }
    Ok(())
}

pub fn parse_text(text: &str) -> Result<WordVectors, CliError> {
    let mut lines = text.lines();
    let (k, d) = header(lines.next().unwrap_or(""))?;
    let mut map = WordVectors::new();
    for (i, line) in lines.enumerate() {
        let at = format!("line {}", i + 2);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("non-empty line");
        let v = fields
            .map(|f| f.parse::<f64>().map_err(|_| CliError::data(format!("{at}: bad number {f:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if v.len() != d {
            return Err(CliError::data(format!("{at}: {} values for dimension {d}", v.len())));
        }
        insert(&mut map, word, v, &at)?;
    }
    if map.len() != k {
        return Err(CliError::data(format!("header announces {k} words, found {}", map.len())));
    }
    Ok(map)
}

pub fn parse_binary(bytes: &[u8]) -> Result<WordVectors, CliError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::data("missing header line"))?;
    let head = std::str::from_utf8(&bytes[..nl]).map_err(|_| CliError::data("header is not UTF-8"))?;
    let (k, d) = header(head)?;
    let mut pos = nl + 1;
    let mut map = WordVectors::new();
    for i in 0..k {
        let at = format!("entry {}", i + 1);
        while pos < bytes.len() && bytes[pos] == b'\n' {
            pos += 1;
        }
        let len = bytes[pos..]
            .iter()
            .position(|&b| b == b' ')
            .ok_or_else(|| CliError::data(format!("{at}: truncated word")))?;
        let word = std::str::from_utf8(&bytes[pos..pos + len]).map_err(|_| CliError::data(format!("{at}: word is not UTF-8")))?;
        pos += len + 1;
        let end = pos + 4 * d;
        if end > bytes.len() {
            return Err(CliError::data(format!("{at}: truncated vector for {word:?}")));
        }
        let v = bytes[pos..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        pos = end;
        insert(&mut map, word, v, &at)?;
    }
    if bytes[pos..].iter().any(|b| !b.is_ascii_whitespace()) {
        return Err(CliError::data(format!("data after the {k} announced words")));
    }
    Ok(map)
}

pub fn load(path: &Path) -> Result<WordVectors, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let parsed = match Format::from_path(path) {
        Format::Binary => parse_binary(&bytes),
        Format::Text => {
            let text = std::str::from_utf8(&bytes).map_err(|_| CliError::data("embedding file is not UTF-8 text"))?;
            parse_text(text)
        }
    };
    parsed.map_err(|e| e.in_file(path))
}

fn dim(vectors: &WordVectors) -> usize {
    vectors.values().next().map_or(0, Vec::len)
}

pub fn to_text(vectors: &WordVectors) -> String {
    let mut s = format!("{} {}\n", vectors.len(), dim(vectors));
    for (w, v) in vectors {
        s.push_str(w);
        for x in v {
            s.push(' ');
            s.push_str(&format!("{x:?}"));
        }
        s.push('\n');
    }
    s
}

/// Values are narrowed to `f32`.
pub fn to_binary(vectors: &WordVectors) -> Vec<u8> {
    let mut out = format!("{} {}\n", vectors.len(), dim(vectors)).into_bytes();
    for (w, v) in vectors {
        out.extend_from_slice(w.as_bytes());
        out.push(b' ');
        for &x in v {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out.push(b'\n');
    }
    out
}

pub fn save(vectors: &WordVectors, path: &Path) -> Result<(), CliError> {
    let bytes = match Format::from_path(path) {
        Format::Binary => to_binary(vectors),
        Format::Text => to_text(vectors).into_bytes(),
    };
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CliError::io(path, e))
}

/// Checksum of the loaded vectors.
pub fn checksum(vectors: &WordVectors) -> u64 {
    let mut fp = Fingerprint::new();
    for (w, v) in vectors {
        fp.str(w).f64s(v);
    }
    fp.finish()
}
