//! Embedding datasets: loading, validation, splitting, batching and synthesis.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod batch;
pub mod format;
mod split;
mod synth;

pub use batch::{iterate_batches, Batch, BatchIter};
pub use split::{make_splits, SplitAssignment};
pub use synth::{synth_dataset, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "MR")]
    Mr,
    #[serde(rename = "OTHER")]
    Other,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Mr => "MR",
            Modality::Other => "OTHER",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
    U,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::M => "M",
            Sex::F => "F",
            Sex::U => "U",
        }
    }
}

/// Per-sample metadata as it appears on one JSON line.
///
/// Keys not consumed by the toolkit are kept in `extra` and written back
/// unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub sample_id: String,
    pub scan_id: String,
    pub institution: String,
    pub modality: Modality,
    pub age_group: String,
    pub sex: Sex,
    pub organs: BTreeSet<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// One image: dense embedding plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub meta: RecordMeta,
    pub embedding: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn sample_id(&self) -> &str {
        &self.meta.sample_id
    }

    pub fn organ_set(&self) -> &BTreeSet<String> {
        &self.meta.organs
    }
}

/// A validated, immutable collection of embedding records.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    d: usize,
    records: Vec<EmbeddingRecord>,
    organ_vocabulary: Vec<String>,
    by_id: HashMap<String, usize>,
}

impl PartialEq for EmbeddingDataset {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d && self.records == other.records
    }
}

impl EmbeddingDataset {
    pub fn new(d: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Dataset("embedding dimension must be >= 1".into()));
        }
        if records.is_empty() {
            return Err(Error::Dataset("dataset has no records".into()));
        }
        let mut by_id = HashMap::with_capacity(records.len());
        let mut vocab = BTreeSet::new();
        for (i, rec) in records.iter().enumerate() {
            if rec.embedding.len() != d {
                return Err(Error::Dataset(format!(
                    "record {} ({}) has length {}, expected {d}",
                    i,
                    rec.sample_id(),
                    rec.embedding.len()
                )));
            }
            if let Some(j) = rec.embedding.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "embedding of {} has non-finite value at column {j}",
                    rec.sample_id()
                )));
            }
            if by_id.insert(rec.meta.sample_id.clone(), i).is_some() {
                return Err(Error::Dataset(format!(
                    "duplicate sample_id {}",
                    rec.sample_id()
                )));
            }
            vocab.extend(rec.meta.organs.iter().cloned());
        }
        Ok(Self {
            d,
            records,
            organ_vocabulary: vocab.into_iter().collect(),
            by_id,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &EmbeddingRecord {
        &self.records[index]
    }

    /// Sorted, de-duplicated union of every record's organ set.
    pub fn organ_vocabulary(&self) -> &[String] {
        &self.organ_vocabulary
    }

    pub fn index_of(&self, sample_id: &str) -> Option<usize> {
        self.by_id.get(sample_id).copied()
    }

    /// Maps sample ids to record indices, returned in dataset order.
    pub fn resolve<'a, I>(&self, ids: I) -> Result<Vec<usize>>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut out = ids
            .into_iter()
            .map(|id| {
                self.index_of(id)
                    .ok_or_else(|| Error::Invalid(format!("unknown sample_id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.records.len()).collect()
    }

    /// Copies the selected embeddings into a row-major `f64` matrix.
    pub fn matrix(&self, indices: &[usize]) -> ndarray::Array2<f64> {
        let mut m = ndarray::Array2::<f64>::zeros((indices.len(), self.d));
        for (row, &i) in m.rows_mut().into_iter().zip(indices) {
            for (dst, &src) in row.into_iter().zip(&self.records[i].embedding) {
                *dst = f64::from(src);
            }
        }
        m
    }
}

/// Loads and validates a SAIL-EMB file and its JSON-lines metadata.
pub fn load_dataset(embeddings_path: &Path, metadata_path: &Path) -> Result<EmbeddingDataset> {
    let file = File::open(embeddings_path)
        .map_err(|e| Error::io(embeddings_path.display().to_string(), e))?;
    let block = format::read_emb_block(&mut BufReader::new(file))?;

    let file =
        File::open(metadata_path).map_err(|e| Error::io(metadata_path.display().to_string(), e))?;
    let mut metas = Vec::with_capacity(block.n);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(metadata_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let meta: RecordMeta = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("metadata line {}: {e}", lineno + 1))
        })?;
        metas.push(meta);
    }
    if metas.len() != block.n {
        return Err(Error::Dataset(format!(
            "row-count mismatch: binary header says n={} but metadata has {} lines",
            block.n,
            metas.len()
        )));
    }

    let records = metas
        .into_iter()
        .enumerate()
        .map(|(i, meta)| EmbeddingRecord {
            meta,
            embedding: block.row(i).to_vec(),
        })
        .collect();
    EmbeddingDataset::new(block.d, records)
}

pub fn save_dataset(
    dataset: &EmbeddingDataset,
    embeddings_path: &Path,
    metadata_path: &Path,
) -> Result<()> {
    let flat: Vec<f32> = dataset
        .records
        .iter()
        .flat_map(|r| r.embedding.iter().copied())
        .collect();
    let file = File::create(embeddings_path)
        .map_err(|e| Error::io(embeddings_path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    format::write_emb_block(&mut w, dataset.d, &flat)?;
    w.flush()
        .map_err(|e| Error::io(embeddings_path.display().to_string(), e))?;

    let file = File::create(metadata_path)
        .map_err(|e| Error::io(metadata_path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for rec in &dataset.records {
        let line = serde_json::to_string(&rec.meta)
            .map_err(|e| Error::Format(format!("serializing metadata: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(metadata_path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(metadata_path.display().to_string(), e))
}

/// Arithmetic mean of the selected embeddings, accumulated in `f64`.
pub fn dataset_mean(dataset: &EmbeddingDataset, indices: &[usize]) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::Invalid("dataset_mean over an empty id set".into()));
    }
    let mut acc = vec![0.0f64; dataset.d];
    for &i in indices {
        for (a, &v) in acc.iter_mut().zip(&dataset.records[i].embedding) {
            *a += f64::from(v);
        }
    }
    let n = indices.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}
