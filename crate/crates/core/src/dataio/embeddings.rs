//! Word-embedding tables from text or word2vec-binary files.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingFormat {
    Text,
    BinaryW2v,
}

/// vocabulary → fixed-dimension vector. Duplicate words keep their first
/// occurrence; the number of dropped duplicates is retained for reporting.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub duplicates: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, duplicates: 0, words: Vec::new(), index: HashMap::new(), vectors: Vec::new() }
    }

    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(CoreError::Format(format!(
                "word {word:?}: vector of {} dims, table has {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(word) {
            self.duplicates += 1;
            return Ok(());
        }
        self.index.insert(word.to_string(), self.words.len());
        self.words.push(word.to_string());
        self.vectors.extend(vector);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingTable> {
    match format {
        EmbeddingFormat::Text => load_text(path),
        EmbeddingFormat::BinaryW2v => load_binary(path),
    }
}

/// One line per word: `word v1 v2 ... vd`. A leading `count dim` header line
/// (the word2vec text convention) is skipped when present.
fn load_text(path: &Path) -> Result<EmbeddingTable> {
    let content = std::fs::read_to_string(path)?;
    let mut table: Option<EmbeddingTable> = None;
    for (ln, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("non-empty line");
        let vector: Vec<f64> = parts
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    CoreError::Format(format!("line {}: bad float {s:?}", ln + 1))
                })
            })
            .collect::<Result<_>>()?;
        if table.is_none() && ln == 0 && vector.len() == 1 && word.parse::<usize>().is_ok() {
            continue; // "vocab_size dim" header
        }
        if vector.is_empty() {
            return Err(CoreError::Format(format!("line {}: no vector values", ln + 1)));
        }
        let t = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
        if vector.len() != t.dim {
            return Err(CoreError::Format(format!(
                "line {}: ragged dimension {} (table has {})",
                ln + 1,
                vector.len(),
                t.dim
            )));
        }
        t.insert(word, vector)?;
    }
    table.ok_or_else(|| CoreError::Format("no embeddings in file".into()))
}

/// Original word2vec binary layout: ascii header "vocab_size dim\n", then per
/// record the word bytes, one space, and dim little-endian f32 values.
fn load_binary(path: &Path) -> Result<EmbeddingTable> {
    let bytes = std::fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CoreError::Format("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| CoreError::Format("header not utf-8".into()))?;
    let mut parts = header.split_whitespace();
    let vocab: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CoreError::Format("bad vocab count in header".into()))?;
    let dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CoreError::Format("bad dimension in header".into()))?;
    let mut table = EmbeddingTable::new(dim);
    let mut pos = nl + 1;
    for rec in 0..vocab {
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b' ' {
            pos += 1;
            if pos - start > 1000 {
                return Err(CoreError::Format(format!(
                    "record {rec}: unterminated word at byte {start} (header dim mismatch?)"
                )));
            }
        }
        if pos >= bytes.len() {
            return Err(CoreError::Format(format!(
                "record {rec}: truncated at byte {pos} (header dim mismatch?)"
            )));
        }
        let word = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| CoreError::Format(format!("record {rec}: word not utf-8")))?
            .trim_start_matches('\n')
            .to_string();
        pos += 1; // space
        let need = dim * 4;
        if pos + need > bytes.len() {
            return Err(CoreError::Format(format!(
                "record {rec}: truncated vector at byte {pos} (header dim mismatch?)"
            )));
        }
        let vector: Vec<f64> = bytes[pos..pos + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        pos += need;
        table.insert(&word, vector)?;
    }
    Ok(table)
}
