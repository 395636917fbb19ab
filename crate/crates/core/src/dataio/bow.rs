//! Bag-of-words document instances: a feature is a word sampled from the
//! corpus vocabulary, its value the occurrence count in the document (zero
//! for sampled-but-absent words — revealing absence is evidence too), its
//! descriptor the word's embedding.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::concrete::Rng;
use crate::error::{CoreError, Result};

use super::{Dataset, EmbeddingTable, Instance};

/// `label<TAB>token token ...` per line.
pub fn load_corpus(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let content = std::fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (ln, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, rest) = line.split_once('\t').ok_or_else(|| {
            CoreError::Format(format!("line {}: expected label<TAB>tokens", ln + 1))
        })?;
        let tokens: Vec<String> = rest.split_whitespace().map(String::from).collect();
        docs.push((label.trim().to_string(), tokens));
    }
    if docs.is_empty() {
        return Err(CoreError::Data("corpus has no documents".into()));
    }
    Ok(docs)
}

/// Build instances by sampling `sample_count` distinct vocabulary words per
/// document. Words without embeddings are excluded from the vocabulary up
/// front. Class indices follow the sorted order of the label strings.
pub fn build_bow_instances(
    corpus_path: &Path,
    embeddings: &EmbeddingTable,
    sample_count: usize,
    log_counts: bool,
    rng: &Rng,
) -> Result<Dataset> {
    let docs = load_corpus(corpus_path)?;

    // vocabulary: corpus words that have embeddings, sorted for determinism
    let mut vocab_set: BTreeMap<&str, ()> = BTreeMap::new();
    for (_, tokens) in &docs {
        for tok in tokens {
            if embeddings.contains(tok) {
                vocab_set.insert(tok, ());
            }
        }
    }
    let vocab: Vec<String> = vocab_set.keys().map(|s| s.to_string()).collect();
    if vocab.is_empty() {
        return Err(CoreError::Data(
            "vocabulary is empty after filtering to embedded words".into(),
        ));
    }
    if sample_count > vocab.len() {
        return Err(CoreError::Config(format!(
            "sample_count {sample_count} exceeds vocabulary size {}",
            vocab.len()
        )));
    }
    let vocab_index: HashMap<&str, usize> =
        vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();

    let mut label_names: Vec<String> = docs.iter().map(|(l, _)| l.clone()).collect();
    label_names.sort();
    label_names.dedup();
    let label_index: HashMap<&str, usize> =
        label_names.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

    let mut instances = Vec::with_capacity(docs.len());
    for (di, (label, tokens)) in docs.iter().enumerate() {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for tok in tokens {
            if let Some(&wi) = vocab_index.get(tok.as_str()) {
                *counts.entry(wi).or_insert(0.0) += 1.0;
            }
        }
        // sample sample_count distinct vocabulary words for this document
        let mut doc_rng = rng.derive(di as u64);
        let mut word_ids: Vec<usize> = (0..vocab.len()).collect();
        for i in 0..sample_count {
            let j = i + doc_rng.below(vocab.len() - i);
            word_ids.swap(i, j);
        }
        word_ids.truncate(sample_count);

        let mut feature_ids = Vec::with_capacity(sample_count);
        let mut values = Vec::with_capacity(sample_count);
        let mut descriptors = Vec::with_capacity(sample_count * embeddings.dim);
        for &wi in &word_ids {
            feature_ids.push(wi as u64);
            let raw = counts.get(&wi).copied().unwrap_or(0.0);
            values.push(if log_counts { (1.0 + raw).ln() } else { raw });
            descriptors
                .extend_from_slice(embeddings.get(&vocab[wi]).expect("vocab is embedded"));
        }
        instances.push(Instance {
            feature_ids,
            values,
            descriptors,
            label: label_index[label.as_str()],
        });
    }
    Ok(Dataset {
        instances,
        n_classes: label_names.len(),
        value_dim: 1,
        descriptor_dim: embeddings.dim,
        image_shape: None,
        label_names: Some(label_names),
    })
}
