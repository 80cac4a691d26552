use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    vectors: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, index: HashMap::new(), tokens: Vec::new(), vectors: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Adds a token; returns `false` (and keeps the old vector) if it is already present.
    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::dims(self.dim, vector.len()));
        }
        if self.index.contains_key(token) {
            return Ok(false);
        }
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.vectors.extend_from_slice(vector);
        Ok(true)
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Tokens in insertion order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Text format: a `vocab_size dim` header, then `token v1 … v_dim` per line.
    pub fn write<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.len(), self.dim)?;
        for (i, t) in self.tokens.iter().enumerate() {
            write!(w, "{t}")?;
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{P}\p{S}]").expect("static pattern"))
}

/// Lowercases, deletes punctuation and symbol characters, and splits on whitespace.
pub fn preprocess_text(raw: &str) -> Vec<String> {
    let lower = raw.to_lowercase();
    punctuation().replace_all(&lower, "").split_whitespace().map(str::to_string).collect()
}

/// Mean of the in-vocabulary token vectors. Tokens are accumulated in sorted
/// order, so the result does not depend on token order. The flag is set when
/// no token is in the vocabulary, in which case the zero vector is returned.
pub fn embed_mean(tokens: &[String], table: &EmbeddingTable) -> (Vec<f64>, bool) {
    let mut found: Vec<&str> = tokens.iter().map(String::as_str).filter(|t| table.get(t).is_some()).collect();
    let mut sum = vec![0.0; table.dim()];
    if found.is_empty() {
        return (sum, true);
    }
    found.sort_unstable();
    for t in &found {
        for (s, v) in sum.iter_mut().zip(table.get(t).unwrap()) {
            *s += v;
        }
    }
    let n = found.len() as f64;
    (sum.into_iter().map(|s| s / n).collect(), false)
}

/// Parses the token-vector text format. Duplicate tokens keep their first vector.
pub fn read_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.ok_or_else(|| Error::MalformedHeader("empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parsed: Vec<usize> = fields.iter().filter_map(|f| f.parse().ok()).collect();
    let (vocab, dim) = match (fields.len(), parsed.as_slice()) {
        (2, &[v, d]) if d >= 1 => (v, d),
        _ => return Err(Error::MalformedHeader(format!("expected `vocab_size dimension`, found {header:?}"))),
    };
    let mut table = EmbeddingTable::new(dim);
    let mut entries = 0;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line: line_no, message: format!("bad number {p:?}") })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::LineDimensionMismatch { line: line_no, expected: dim, actual: values.len() });
        }
        if !table.insert(token, &values)? {
            log::warn!("line {line_no}: duplicate token {token:?} ignored");
        }
        entries += 1;
    }
    if entries != vocab {
        log::warn!("header announces {vocab} tokens, file has {entries}");
    }
    Ok(table)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    read_embeddings(std::io::BufReader::new(file)).map_err(|e| e.in_file(path))
}
