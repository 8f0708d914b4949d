//! Item catalogs and multi-annotator pairwise preference datasets.
//!
//! Both artifacts are JSON Lines files, one object per line:
//!
//! - catalog: `{"item_id": "...", "embedding": [f, ...], "text": "optional"}`
//! - preferences: `{"annotator_id": "...", "cohort_id": "...", "chosen": "...", "rejected": "..."}`
//!
//! Validation is strict-fail: the first bad line aborts the load with its
//! line number, rather than skipping records and silently skewing the
//! preference statistics downstream.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Errors raised while loading, validating, or splitting preference data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: parse error: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("catalog {path} contains no items")]
    EmptyCatalog { path: PathBuf },
    #[error("line {line}: item {item_id:?} has embedding dimension {found}, expected {expected}")]
    DimensionMismatch {
        line: usize,
        item_id: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate item id {item_id:?}")]
    DuplicateItem { line: usize, item_id: String },
    #[error("line {line}: item {item_id:?} has a non-finite embedding entry")]
    NonFiniteEmbedding { line: usize, item_id: String },
    #[error("line {line}: empty embedding for item {item_id:?}")]
    EmptyEmbedding { line: usize, item_id: String },
    #[error("line {line}: unknown item {item_id:?}")]
    UnknownItem { line: usize, item_id: String },
    #[error("line {line}: record for annotator {annotator_id:?} compares item {item_id:?} with itself")]
    SelfComparison {
        line: usize,
        annotator_id: String,
        item_id: String,
    },
    #[error("annotator {annotator_id:?} has fewer than 2 records; cannot split")]
    TooFewRecords { annotator_id: String },
    #[error("holdout fraction must lie in (0,1), got {value}")]
    InvalidFraction { value: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogLine<F> {
    item_id: String,
    embedding: Vec<F>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

/// One catalog entry: a fixed embedding plus optional display text.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogItem<F = f64> {
    pub embedding: Vec<F>,
    pub text: Option<String>,
}

/// Immutable map from item id to a d-dimensional embedding.
///
/// Embeddings arrive precomputed; this crate never derives features itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog<F = f64> {
    items: IndexMap<String, CatalogItem<F>>,
    dim: usize,
}

impl<F: Scalar> ItemCatalog<F> {
    /// Builds a catalog from `(item_id, embedding, text)` entries, validating
    /// unique ids, a consistent dimension, and finite entries.
    ///
    /// Entry positions are reported as 1-based "lines" in errors so the same
    /// constructor backs both file loading and in-memory construction.
    pub fn new(
        entries: impl IntoIterator<Item = (String, Vec<F>, Option<String>)>,
    ) -> Result<Self, DataError> {
        let mut items: IndexMap<String, CatalogItem<F>> = IndexMap::new();
        let mut dim: Option<usize> = None;
        for (idx, (item_id, embedding, text)) in entries.into_iter().enumerate() {
            let line = idx + 1;
            if embedding.is_empty() {
                return Err(DataError::EmptyEmbedding { line, item_id });
            }
            let expected = *dim.get_or_insert(embedding.len());
            if embedding.len() != expected {
                return Err(DataError::DimensionMismatch {
                    line,
                    item_id,
                    expected,
                    found: embedding.len(),
                });
            }
            if embedding.iter().any(|x| !x.is_finite()) {
                return Err(DataError::NonFiniteEmbedding { line, item_id });
            }
            if items.contains_key(&item_id) {
                return Err(DataError::DuplicateItem { line, item_id });
            }
            items.insert(item_id, CatalogItem { embedding, text });
        }
        let dim = dim.unwrap_or(0);
        Ok(Self { items, dim })
    }

    /// Loads a catalog from a JSON-Lines file; empty files are rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CatalogLine<F> =
                serde_json::from_str(&line).map_err(|source| DataError::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    source,
                })?;
            entries.push((rec.item_id, rec.embedding, rec.text));
        }
        if entries.is_empty() {
            return Err(DataError::EmptyCatalog {
                path: path.to_path_buf(),
            });
        }
        // Positions equal line numbers only when the file has no blank lines;
        // good enough for error reporting.
        Self::new(entries)
    }

    /// Writes the catalog back out as JSON Lines, in catalog order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let mut file = File::create(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for (item_id, item) in &self.items {
            let line = CatalogLine {
                item_id: item_id.clone(),
                embedding: item.embedding.clone(),
                text: item.text.clone(),
            };
            let json = serde_json::to_string(&line).expect("catalog line serializes");
            writeln!(file, "{json}").map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.items.contains_key(item_id)
    }

    pub fn get(&self, item_id: &str) -> Option<&CatalogItem<F>> {
        self.items.get(item_id)
    }

    /// Embedding lookup that reports the missing id.
    pub fn embedding(&self, item_id: &str) -> Result<&[F], DataError> {
        self.items
            .get(item_id)
            .map(|item| item.embedding.as_slice())
            .ok_or_else(|| DataError::UnknownItem {
                line: 0,
                item_id: item_id.to_string(),
            })
    }

    /// Position of an item in catalog order, for index-based hot loops.
    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.items.get_index_of(item_id)
    }

    pub fn id_at(&self, index: usize) -> Option<&str> {
        self.items.get_index(index).map(|(id, _)| id.as_str())
    }

    pub fn embedding_at(&self, index: usize) -> Option<&[F]> {
        self.items
            .get_index(index)
            .map(|(_, item)| item.embedding.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CatalogItem<F>)> {
        self.items.iter().map(|(id, item)| (id.as_str(), item))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(String::as_str)
    }
}

/// A single labelled comparison: `annotator_id` preferred `chosen` over
/// `rejected`. This struct is also the JSONL line format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub annotator_id: String,
    pub cohort_id: String,
    pub chosen: String,
    pub rejected: String,
}

/// Multi-annotator pairwise preference dataset with cohort tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceDataset {
    records: Vec<PreferenceRecord>,
    provenance: Option<String>,
}

impl PreferenceDataset {
    /// Validates records against a catalog: every referenced item must exist
    /// and no record may compare an item with itself.
    pub fn new<F: Scalar>(
        records: Vec<PreferenceRecord>,
        catalog: &ItemCatalog<F>,
    ) -> Result<Self, DataError> {
        for (idx, rec) in records.iter().enumerate() {
            let line = idx + 1;
            if rec.chosen == rec.rejected {
                return Err(DataError::SelfComparison {
                    line,
                    annotator_id: rec.annotator_id.clone(),
                    item_id: rec.chosen.clone(),
                });
            }
            for item_id in [&rec.chosen, &rec.rejected] {
                if !catalog.contains(item_id) {
                    return Err(DataError::UnknownItem {
                        line,
                        item_id: item_id.clone(),
                    });
                }
            }
        }
        Ok(Self {
            records,
            provenance: None,
        })
    }

    /// Loads and validates a JSON-Lines preference file.
    pub fn load<F: Scalar>(
        path: impl AsRef<Path>,
        catalog: &ItemCatalog<F>,
    ) -> Result<Self, DataError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PreferenceRecord =
                serde_json::from_str(&line).map_err(|source| DataError::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    source,
                })?;
            records.push(rec);
        }
        Self::new(records, catalog)
    }

    /// Writes the dataset as JSON Lines, in record order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let mut file = File::create(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for rec in &self.records {
            let json = serde_json::to_string(rec).expect("record serializes");
            writeln!(file, "{json}").map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
        Ok(())
    }

    /// Tags the dataset with a provenance label (e.g. which collection wave).
    pub fn with_provenance(mut self, tag: impl Into<String>) -> Self {
        self.provenance = Some(tag.into());
        self
    }

    pub fn provenance(&self) -> Option<&str> {
        self.provenance.as_deref()
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record counts per annotator, in sorted annotator order.
    pub fn annotator_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for rec in &self.records {
            *counts.entry(rec.annotator_id.as_str()).or_insert(0) += 1;
        }
        counts
    }

    /// Record indices grouped per annotator, annotators in sorted order,
    /// indices in record order.
    pub fn by_annotator(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (idx, rec) in self.records.iter().enumerate() {
            groups.entry(rec.annotator_id.as_str()).or_default().push(idx);
        }
        groups
    }

    /// Distinct cohort ids present, sorted.
    pub fn cohorts(&self) -> Vec<&str> {
        let mut cohorts: Vec<&str> = self
            .records
            .iter()
            .map(|r| r.cohort_id.as_str())
            .collect();
        cohorts.sort_unstable();
        cohorts.dedup();
        cohorts
    }

    /// Keeps only records whose cohort tag is listed.
    pub fn retain_cohorts(&self, cohorts: &[&str]) -> Self {
        let records = self
            .records
            .iter()
            .filter(|rec| cohorts.contains(&rec.cohort_id.as_str()))
            .cloned()
            .collect();
        Self {
            records,
            provenance: self.provenance.clone(),
        }
    }

    /// Keeps only the records of annotators with at least `min_count`
    /// records. Idempotent; may return an empty dataset.
    pub fn filter_min_count(&self, min_count: usize) -> Self {
        let counts = self.annotator_counts();
        let records = self
            .records
            .iter()
            .filter(|rec| counts[rec.annotator_id.as_str()] >= min_count)
            .cloned()
            .collect();
        Self {
            records,
            provenance: self.provenance.clone(),
        }
    }

    /// Splits each annotator's records into train and holdout parts.
    ///
    /// Per annotator, `ceil(fraction * count)` records go to the holdout,
    /// chosen by seeded uniform sampling without replacement; the rest stay
    /// in the train split. The two parts partition the input exactly and the
    /// split is deterministic given the seed.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Self, Self), DataError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(DataError::InvalidFraction { value: fraction });
        }
        let groups = self.by_annotator();
        for (annotator_id, indices) in &groups {
            if indices.len() < 2 {
                return Err(DataError::TooFewRecords {
                    annotator_id: annotator_id.to_string(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut holdout_mask = vec![false; self.records.len()];
        for indices in groups.values() {
            let count = indices.len();
            let take = (fraction * count as f64).ceil() as usize;
            for pick in rand::seq::index::sample(&mut rng, count, take) {
                holdout_mask[indices[pick]] = true;
            }
        }
        let (mut train, mut holdout) = (Vec::new(), Vec::new());
        for (idx, rec) in self.records.iter().enumerate() {
            if holdout_mask[idx] {
                holdout.push(rec.clone());
            } else {
                train.push(rec.clone());
            }
        }
        Ok((
            Self {
                records: train,
                provenance: self.provenance.clone(),
            },
            Self {
                records: holdout,
                provenance: self.provenance.clone(),
            },
        ))
    }
}
