//! Sparse fingerprints and exhaustive cosine retrieval.
//!
//! Index file layout (little-endian):
//!
//! ```text
//! "SAEI" | version u32 | SAIL-EMB block of dense embeddings
//!        | fingerprint section length u64 | JSON lines, one per sample
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::FeatureActivationTable;
use crate::sae::SparseCode;
use crate::store::format::{read_emb_block, read_exact, write_emb_block, EmbBlock};

pub const INDEX_MAGIC: [u8; 4] = *b"SAEI";
pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_TOP_M: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FingerprintSource {
    Image,
    Query,
}

/// Up to `k` `(feature, value)` pairs with positive values, sorted by feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub entries: Vec<(usize, f64)>,
    pub source: FingerprintSource,
}

fn top_k(entries: &[(usize, f64)], k: usize) -> Vec<(usize, f64)> {
    let mut e: Vec<(usize, f64)> = entries.iter().copied().filter(|e| e.1 > 0.0).collect();
    e.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    e.truncate(k);
    e.sort_by_key(|x| x.0);
    e
}

impl Fingerprint {
    pub fn empty(source: FingerprintSource) -> Self {
        Self {
            entries: Vec::new(),
            source,
        }
    }

    /// The `k` largest entries of this fingerprint.
    pub fn truncate(&self, k: usize) -> Self {
        Self {
            entries: top_k(&self.entries, k),
            source: self.source,
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The `k` most activated features of `code`, ties to the smaller index.
pub fn fingerprint(code: &SparseCode, k: usize) -> Fingerprint {
    Fingerprint {
        entries: top_k(&code.entries, k),
        source: FingerprintSource::Image,
    }
}

/// Cosine over sparse supports; 0 if either side is empty.
pub fn sparse_cosine(a: &Fingerprint, b: &Fingerprint) -> f64 {
    let sq = |f: &Fingerprint| f.entries.iter().map(|e| e.1 * e.1).sum::<f64>();
    let (na, nb) = (sq(a), sq(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < a.entries.len() && j < b.entries.len() {
        let (fa, va) = a.entries[i];
        let (fb, vb) = b.entries[j];
        match fa.cmp(&fb) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += va * vb;
                i += 1;
                j += 1;
            }
        }
    }
    dot / (na * nb).sqrt()
}

fn dense_cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine with a zero-norm dense embedding".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Fingerprints and dense embeddings of a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    sample_ids: Vec<String>,
    fingerprints: Vec<Fingerprint>,
    dense: EmbBlock,
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    sample_id: String,
    entries: Vec<(usize, f64)>,
}

impl RetrievalIndex {
    pub fn new(sample_ids: Vec<String>, fingerprints: Vec<Fingerprint>, dense: EmbBlock) -> Result<Self> {
        if sample_ids.len() != fingerprints.len() || sample_ids.len() != dense.n {
            return Err(Error::Shape(format!(
                "{} ids, {} fingerprints, {} dense rows",
                sample_ids.len(),
                fingerprints.len(),
                dense.n
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Dataset(format!("duplicate sample_id {dup} in index")));
        }
        Ok(Self {
            sample_ids,
            fingerprints,
            dense,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn fingerprints(&self) -> &[Fingerprint] {
        &self.fingerprints
    }

    pub fn dense(&self) -> &EmbBlock {
        &self.dense
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.sample_ids.iter().position(|s| s == sample_id)
    }

    fn require(&self, sample_id: &str) -> Result<usize> {
        self.position(sample_id)
            .ok_or_else(|| Error::Invalid(format!("sample {sample_id} is not in the index")))
    }

    /// Same index with every fingerprint cut to `k` entries.
    pub fn restrict(&self, k: usize) -> Self {
        Self {
            sample_ids: self.sample_ids.clone(),
            fingerprints: self.fingerprints.iter().map(|f| f.truncate(k)).collect(),
            dense: self.dense.clone(),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::io("<index>", e);
        w.write_all(&INDEX_MAGIC).map_err(io)?;
        w.write_all(&INDEX_VERSION.to_le_bytes()).map_err(io)?;
        write_emb_block(w, self.dense.d, &self.dense.data)?;
        let mut lines = Vec::new();
        for (id, fp) in self.sample_ids.iter().zip(&self.fingerprints) {
            let line = IndexLine {
                sample_id: id.clone(),
                entries: fp.entries.clone(),
            };
            serde_json::to_writer(&mut lines, &line).map_err(|e| Error::Format(e.to_string()))?;
            lines.push(b'\n');
        }
        w.write_all(&(lines.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&lines).map_err(io)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 8];
        read_exact(r, &mut head, "index header")?;
        if head[0..4] != INDEX_MAGIC {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(Error::Version {
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let dense = read_emb_block(r)?;
        let mut len = [0u8; 8];
        read_exact(r, &mut len, "fingerprint section length")?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 36 {
            return Err(Error::Format(format!("fingerprint section claims {len} bytes")));
        }
        let mut body = vec![0u8; len as usize];
        read_exact(r, &mut body, "fingerprint section")?;
        let text = std::str::from_utf8(&body).map_err(|e| Error::Format(e.to_string()))?;
        let mut ids = Vec::new();
        let mut fps = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let l: IndexLine = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("fingerprint line {}: {e}", n + 1)))?;
            ids.push(l.sample_id);
            fps.push(Fingerprint {
                entries: l.entries,
                source: FingerprintSource::Image,
            });
        }
        Self::new(ids, fps, dense)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read(&mut BufReader::new(file))
    }
}

/// A retrieval hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub sample_id: String,
    pub similarity: f64,
}

fn rank(mut scored: Vec<(usize, f64)>, index: &RetrievalIndex, top_m: usize) -> Vec<Hit> {
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.sample_ids[a.0].cmp(&index.sample_ids[b.0]))
    });
    scored.truncate(top_m);
    scored
        .into_iter()
        .map(|(i, s)| Hit {
            sample_id: index.sample_ids[i].clone(),
            similarity: s,
        })
        .collect()
}

/// Top `top_m` samples by fingerprint cosine, ties by sample id.
pub fn retrieve(query: &Fingerprint, index: &RetrievalIndex, top_m: usize, exclude: Option<&str>) -> Result<Vec<Hit>> {
    if index.is_empty() {
        return Err(Error::Invalid("retrieval over an empty index".into()));
    }
    if top_m == 0 {
        return Err(Error::Config("top_m must be at least 1".into()));
    }
    let scored = (0..index.len())
        .filter(|&i| exclude != Some(index.sample_ids[i].as_str()))
        .map(|i| (i, sparse_cosine(query, &index.fingerprints[i])))
        .collect();
    Ok(rank(scored, index, top_m))
}

/// Top `top_m` samples by dense cosine to `reference_id`, excluding it.
pub fn retrieve_dense(index: &RetrievalIndex, reference_id: &str, top_m: usize) -> Result<Vec<Hit>> {
    let r = index.require(reference_id)?;
    let reference = index.dense.row(r);
    let mut scored = Vec::with_capacity(index.len());
    for i in (0..index.len()).filter(|&i| i != r) {
        scored.push((i, dense_cosine(reference, index.dense.row(i))?));
    }
    Ok(rank(scored, index, top_m))
}

/// Mean dense cosine between the reference and each retrieved sample.
pub fn retrieval_quality(index: &RetrievalIndex, reference_id: &str, retrieved: &[String]) -> Result<f64> {
    if retrieved.is_empty() {
        return Err(Error::Invalid("nothing retrieved".into()));
    }
    let reference = index.dense.row(index.require(reference_id)?);
    let mut total = 0.0;
    for id in retrieved {
        total += dense_cosine(reference, index.dense.row(index.require(id)?))?;
    }
    Ok(total / retrieved.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEval {
    pub n_refs: usize,
    pub top_m: usize,
    pub seed: u64,
    /// Mean quality of fingerprint retrieval, keyed by fingerprint size.
    pub by_k: BTreeMap<usize, f64>,
    pub dense: f64,
}

/// Mean retrieval quality over `n_refs` seeded references, per `k` and for
/// dense retrieval.
pub fn evaluate_fingerprint_retrieval(
    index: &RetrievalIndex,
    k_list: &[usize],
    n_refs: usize,
    top_m: usize,
    seed: u64,
) -> Result<RetrievalEval> {
    if n_refs == 0 || n_refs > index.len() {
        return Err(Error::Config(format!("n_refs {n_refs} outside 1..={}", index.len())));
    }
    if index.len() < 2 {
        return Err(Error::Invalid("retrieval evaluation needs at least two samples".into()));
    }
    if k_list.contains(&0) {
        return Err(Error::Config("fingerprint size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let refs: Vec<String> = order[..n_refs]
        .iter()
        .map(|&i| index.sample_ids[i].clone())
        .collect();

    let ids = |hits: Vec<Hit>| -> Vec<String> { hits.into_iter().map(|h| h.sample_id).collect() };
    let mut by_k = BTreeMap::new();
    for &k in k_list {
        let restricted = index.restrict(k);
        let mut total = 0.0;
        for r in &refs {
            let q = &restricted.fingerprints[restricted.require(r)?];
            let hits = retrieve(q, &restricted, top_m, Some(r))?;
            total += retrieval_quality(index, r, &ids(hits))?;
        }
        by_k.insert(k, total / n_refs as f64);
    }
    let mut dense = 0.0;
    for r in &refs {
        dense += retrieval_quality(index, r, &ids(retrieve_dense(index, r, top_m)?))?;
    }
    Ok(RetrievalEval {
        n_refs,
        top_m,
        seed,
        by_k,
        dense: dense / n_refs as f64,
    })
}

/// Query fingerprint from the mean activation of each feature over the
/// samples where it fires; features that never fire are dropped.
pub fn mean_activation_fingerprint(features: &[usize], table: &FeatureActivationTable, k: usize) -> Result<Fingerprint> {
    if features.is_empty() {
        return Err(Error::Invalid("no features for a query fingerprint".into()));
    }
    let mut entries = Vec::new();
    for &f in features {
        let acts = table
            .features
            .get(f)
            .ok_or_else(|| Error::Invalid(format!("feature {f} outside the dictionary")))?;
        if acts.is_empty() {
            continue;
        }
        let mean = acts.iter().map(|a| a.1).sum::<f64>() / acts.len() as f64;
        entries.push((f, mean));
    }
    entries.sort_by_key(|e| e.0);
    entries.dedup_by_key(|e| e.0);
    Ok(Fingerprint {
        entries: top_k(&entries, k),
        source: FingerprintSource::Query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(e: &[(usize, f64)]) -> Fingerprint {
        Fingerprint {
            entries: e.to_vec(),
            source: FingerprintSource::Image,
        }
    }

    fn code(e: &[(usize, f64)]) -> SparseCode {
        SparseCode {
            level: 1,
            entries: e.to_vec(),
        }
    }

    fn block(rows: &[&[f32]]) -> EmbBlock {
        EmbBlock {
            d: rows[0].len(),
            n: rows.len(),
            data: rows.concat(),
        }
    }

    #[test]
    fn fingerprint_cases() {
        let c = code(&[(2, 0.5), (7, 0.9), (9, 0.1)]);
        assert_eq!(fingerprint(&c, 2).entries, vec![(2, 0.5), (7, 0.9)]);
        assert_eq!(fingerprint(&c, 5).entries, c.entries);
        assert!(fingerprint(&SparseCode::empty(1), 3).is_empty());
        let tie = code(&[(4, 1.0), (1, 1.0)]);
        assert_eq!(fingerprint(&tie, 1).entries, vec![(1, 1.0)]);
    }

    #[test]
    fn cosine_cases() {
        let a = fp(&[(0, 1.0), (1, 1.0)]);
        let b = fp(&[(1, 1.0), (2, 1.0)]);
        assert_eq!(sparse_cosine(&a, &b), 0.5);
        assert!((sparse_cosine(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(sparse_cosine(&a, &fp(&[(5, 2.0)])), 0.0);
        assert_eq!(sparse_cosine(&a, &fp(&[])), 0.0);
    }

    fn three() -> RetrievalIndex {
        RetrievalIndex::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![fp(&[(0, 1.0), (1, 1.0)]), fp(&[(5, 1.0)]), fp(&[(1, 1.0), (2, 1.0)])],
            block(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]),
        )
        .unwrap()
    }

    #[test]
    fn retrieve_orders_by_similarity() {
        let idx = three();
        // similarities: a 0.5, b 0.0, c 1.0
        let hits = retrieve(&fp(&[(1, 1.0), (2, 1.0)]), &idx, 10, None).unwrap();
        let order: Vec<&str> = hits.iter().map(|h| h.sample_id.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
        assert!((hits[0].similarity - 1.0).abs() < 1e-15);
        let hits = retrieve(&fp(&[(1, 1.0), (2, 1.0)]), &idx, 1, Some("c")).unwrap();
        assert_eq!(hits[0].sample_id, "a");
    }

    #[test]
    fn quality_cases() {
        let idx = three();
        assert!((retrieval_quality(&idx, "a", &["a".into()]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(retrieval_quality(&idx, "a", &["b".into()]).unwrap(), 0.0);
        assert!(retrieval_quality(&idx, "a", &[]).is_err());
        let zero = RetrievalIndex::new(
            vec!["x".into(), "y".into()],
            vec![fp(&[]), fp(&[])],
            block(&[&[0.0, 0.0], &[1.0, 0.0]]),
        )
        .unwrap();
        assert!(retrieval_quality(&zero, "x", &["y".into()]).is_err());
    }

    #[test]
    fn index_roundtrip() {
        let idx = three();
        let mut buf = Vec::new();
        idx.write(&mut buf).unwrap();
        assert_eq!(RetrievalIndex::read(&mut buf.as_slice()).unwrap(), idx);
        assert!(RetrievalIndex::read(&mut &buf[..buf.len() - 2]).is_err());
    }

    #[test]
    fn mean_activation_cases() {
        let table = FeatureActivationTable {
            eval_indices: vec![0, 1],
            features: vec![vec![(0, 1.0), (1, 3.0)], vec![], vec![(0, 5.0)]],
        };
        assert_eq!(mean_activation_fingerprint(&[0], &table, 4).unwrap().entries, vec![(0, 2.0)]);
        assert!(mean_activation_fingerprint(&[1], &table, 4).unwrap().is_empty());
        assert_eq!(mean_activation_fingerprint(&[0, 2], &table, 1).unwrap().entries, vec![(2, 5.0)]);
        assert!(mean_activation_fingerprint(&[], &table, 1).is_err());
    }
}
