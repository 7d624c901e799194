//! Question embeddings: signed feature hashing of word n-grams, or a table of
//! externally computed sentence vectors.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::fnv1a64;

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderKind {
    HashedNgram,
    External,
}

#[derive(Debug, Clone)]
pub struct Embedder {
    kind: EmbedderKind,
    dim: usize,
    ngram_orders: BTreeSet<usize>,
    table: Option<HashMap<String, Vec<f64>>>,
    config_id: String,
}

impl Default for Embedder {
    fn default() -> Self {
        Embedder::hashed(DEFAULT_DIM, [1, 2]).expect("default configuration is valid")
    }
}

impl Embedder {
    pub fn hashed(dim: usize, orders: impl IntoIterator<Item = usize>) -> Result<Self> {
        let ngram_orders: BTreeSet<usize> = orders.into_iter().collect();
        if dim == 0 || ngram_orders.is_empty() || ngram_orders.contains(&0) {
            return Err(Error::Config(
                "hashed embedder needs dim > 0 and positive n-gram orders".into(),
            ));
        }
        let orders_txt: Vec<String> = ngram_orders.iter().map(|n| n.to_string()).collect();
        let descriptor = format!("hashed_ngram;fnv1a64;dim={dim};orders={}", orders_txt.join(","));
        Ok(Embedder {
            kind: EmbedderKind::HashedNgram,
            dim,
            ngram_orders,
            table: None,
            config_id: format!("hashed-{:016x}", fnv1a64(descriptor.as_bytes())),
        })
    }

    pub fn kind(&self) -> EmbedderKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config_id(&self) -> &str {
        &self.config_id
    }

    pub fn embed(&self, question: &str) -> Result<Vec<f64>> {
        match self.kind {
            EmbedderKind::HashedNgram => {
                let tokens = tokenize(question);
                if tokens.is_empty() {
                    return Err(Error::schema("question", "cannot embed empty text"));
                }
                Ok(self.hash_tokens(&tokens))
            }
            EmbedderKind::External => self
                .table
                .as_ref()
                .and_then(|t| t.get(question))
                .cloned()
                .ok_or_else(|| Error::UnknownQuestion(question.to_string())),
        }
    }

    fn hash_tokens(&self, tokens: &[String]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &n in &self.ngram_orders {
            for gram in tokens.windows(n) {
                let h = fnv1a64(gram.join(" ").as_bytes());
                let bucket = (h % self.dim as u64) as usize;
                let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
                v[bucket] += sign;
            }
        }
        normalize(&mut v);
        v
    }
}

/// Lowercases, drops punctuation other than `?`, and splits `?` into its own
/// token so that `cat?` and `cat` share the unigram `cat`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len() + 4);
    for c in text.chars().flat_map(char::to_lowercase) {
        if c == '?' {
            cleaned.push_str(" ? ");
        } else if c.is_alphanumeric() || c.is_whitespace() {
            cleaned.push(c);
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

#[derive(Deserialize)]
struct EmbeddingRow {
    question: String,
    vector: Vec<f64>,
}

/// Reads `{"question": str, "vector": [f64]}` rows into an external embedder.
pub fn load_external_embeddings(path: &Path) -> Result<Embedder> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::schema("embeddings", format!("not UTF-8: {e}")))?;
    let mut table: HashMap<String, Vec<f64>> = HashMap::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: EmbeddingRow = serde_json::from_str(line)
            .map_err(|e| Error::schema("embeddings", e.to_string()).at_line(i + 1))?;
        let expected = *dim.get_or_insert(row.vector.len());
        if row.vector.len() != expected || expected == 0 {
            return Err(Error::DimensionMismatch {
                expected,
                found: row.vector.len(),
            });
        }
        if table.contains_key(&row.question) {
            return Err(Error::DuplicateQuestion(row.question));
        }
        let mut v = row.vector;
        normalize(&mut v);
        table.insert(row.question, v);
    }
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(Embedder {
        kind: EmbedderKind::External,
        dim: dim.unwrap_or(0),
        ngram_orders: BTreeSet::new(),
        table: Some(table),
        config_id: format!("external-{hex}"),
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let e = Embedder::default();
        let a = e.embed("What kind of animal is this?").unwrap();
        let b = e.embed("What kind of animal is this?").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), DEFAULT_DIM);
        assert!((dot(&a, &a).sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tokenizer_strips_punctuation_but_keeps_question_mark() {
        assert_eq!(tokenize("What's the cat's COLOR?"), vec!["whats", "the", "cats", "color", "?"]);
        assert!(tokenize(" ,.; ").is_empty());
        assert!(Embedder::default().embed("...").is_err());
    }

    #[test]
    fn config_id_tracks_configuration() {
        let a = Embedder::hashed(256, [1, 2]).unwrap();
        let b = Embedder::hashed(256, [2, 1]).unwrap();
        let c = Embedder::hashed(128, [1, 2]).unwrap();
        let d = Embedder::hashed(256, [1]).unwrap();
        assert_eq!(a.config_id(), b.config_id());
        assert_ne!(a.config_id(), c.config_id());
        assert_ne!(a.config_id(), d.config_id());
    }

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn external_table_is_normalized_and_keyed_by_text() {
        let f = write_tmp(&[
            r#"{"question": "a?", "vector": [3.0, 4.0]}"#,
            r#"{"question": "b?", "vector": [0.0, 2.0]}"#,
        ]);
        let e = load_external_embeddings(f.path()).unwrap();
        assert_eq!(e.kind(), EmbedderKind::External);
        assert_eq!(e.dim(), 2);
        assert_eq!(e.embed("a?").unwrap(), vec![0.6, 0.8]);
        assert!(matches!(e.embed("c?"), Err(Error::UnknownQuestion(_))));
        assert!(e.config_id().starts_with("external-"));
    }

    #[test]
    fn external_table_rejects_mixed_dims_and_duplicates() {
        let f = write_tmp(&[
            r#"{"question": "a?", "vector": [3.0, 4.0]}"#,
            r#"{"question": "b?", "vector": [0.0, 2.0, 1.0]}"#,
        ]);
        assert!(matches!(load_external_embeddings(f.path()), Err(Error::DimensionMismatch { .. })));
        let f = write_tmp(&[
            r#"{"question": "a?", "vector": [3.0, 4.0]}"#,
            r#"{"question": "a?", "vector": [1.0, 0.0]}"#,
        ]);
        assert!(matches!(load_external_embeddings(f.path()), Err(Error::DuplicateQuestion(_))));
    }
}
