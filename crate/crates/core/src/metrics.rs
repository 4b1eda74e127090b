//! Reconstruction, sparsity and monosemanticity metrics, plus the combined
//! configuration ranking.
//!
//! A feature's monosemanticity is `M = C * S`:
//!
//! - coherence `C`: mean pairwise Jaccard similarity of the organ sets of its
//!   top activating samples, rescaled so the random-pair level maps to 0:
//!   `max(0, (J - J_null) / (1 - J_null))`;
//! - specificity `S`: `1 - H(p) / ln |O|` for the organ-label distribution `p`
//!   pooled over the same samples, `O` the dataset's organ vocabulary.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sae::{self, SaeConfig, SaeParams, SparseCode};
use crate::store::EmbeddingDataset;

/// Number of top-activating samples used for feature scores.
pub const TOP_SAMPLES: usize = 10;
/// Number of top features averaged into a configuration score.
pub const TOP_FEATURES: usize = 10;
pub const DEFAULT_NULL_PAIRS: usize = 1000;

/// `1 - SSE / SST`, SST about the column means of `x`.
pub fn r_squared(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dim(), x_hat.dim())));
    }
    if x.nrows() < 2 {
        return Err(Error::Invalid("R^2 needs at least two rows".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let mut sse = 0.0;
    let mut sst = 0.0;
    for (row, row_hat) in x.rows().into_iter().zip(x_hat.rows()) {
        for ((&v, &h), &m) in row.iter().zip(row_hat).zip(&mean) {
            sse += (v - h) * (v - h);
            sst += (v - m) * (v - m);
        }
    }
    if sst == 0.0 {
        return Err(Error::Invalid("R^2 undefined for constant data (SST = 0)".into()));
    }
    Ok(1.0 - sse / sst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub mean_l0: f64,
    pub alive: usize,
}

pub fn sparsity_stats(codes: &[SparseCode]) -> SparsityStats {
    if codes.is_empty() {
        return SparsityStats { mean_l0: 0.0, alive: 0 };
    }
    let total: usize = codes.iter().map(SparseCode::l0).sum();
    let alive: BTreeSet<usize> = codes
        .iter()
        .flat_map(|c| c.entries.iter().map(|e| e.0))
        .collect();
    SparsityStats {
        mean_l0: total as f64 / codes.len() as f64,
        alive: alive.len(),
    }
}

/// `|a ∩ b| / |a ∪ b|`, 1 when both are empty.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Activations of every feature over an evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureActivationTable {
    /// Record indices of the evaluation split, in dataset order.
    pub eval_indices: Vec<usize>,
    /// `features[j]`: `(record index, activation)` for samples where `j` fired.
    pub features: Vec<Vec<(usize, f64)>>,
}

impl FeatureActivationTable {
    /// `codes[i]` belongs to record `eval_indices[i]`.
    pub fn from_codes(eval_indices: &[usize], codes: &[SparseCode], dict_size: usize) -> Self {
        let mut features = vec![Vec::new(); dict_size];
        for (&rec, code) in eval_indices.iter().zip(codes) {
            for &(j, v) in &code.entries {
                if j < dict_size && v > 0.0 {
                    features[j].push((rec, v));
                }
            }
        }
        Self {
            eval_indices: eval_indices.to_vec(),
            features,
        }
    }

    /// JumpReLU codes at the final level over `eval_indices`.
    pub fn build(
        params: &SaeParams,
        config: &SaeConfig,
        dataset: &EmbeddingDataset,
        eval_indices: &[usize],
    ) -> Result<Self> {
        let codes = encode_final_level(params, config, dataset, eval_indices)?;
        Ok(Self::from_codes(eval_indices, &codes, config.max_dict()))
    }

    pub fn dict_size(&self) -> usize {
        self.features.len()
    }

    /// Up to `n` `(record, activation)` pairs, largest activation first,
    /// ties by record index.
    pub fn top_samples(&self, feature: usize, n: usize) -> Vec<(usize, f64)> {
        let mut acts = self.features.get(feature).cloned().unwrap_or_default();
        acts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        acts.truncate(n);
        acts
    }
}

/// JumpReLU codes at the final level, chunked to bound memory.
pub fn encode_final_level(
    params: &SaeParams,
    config: &SaeConfig,
    dataset: &EmbeddingDataset,
    indices: &[usize],
) -> Result<Vec<SparseCode>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(4096) {
        let x = dataset.matrix(chunk);
        out.extend(sae::encode_inference_batch(params, x.view(), config, config.levels())?);
    }
    Ok(out)
}

/// Mean Jaccard similarity of organ sets over `pairs` seeded random pairs of
/// distinct evaluation samples.
pub fn null_jaccard(dataset: &EmbeddingDataset, eval_indices: &[usize], pairs: usize, seed: u64) -> f64 {
    if eval_indices.len() < 2 || pairs == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = eval_indices.len();
    let mut total = 0.0;
    for _ in 0..pairs {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        total += jaccard(
            dataset.record(eval_indices[a]).organ_set(),
            dataset.record(eval_indices[b]).organ_set(),
        );
    }
    total / pairs as f64
}

/// Coherence against a precomputed null level.
pub fn coherence_with_null(
    feature: usize,
    table: &FeatureActivationTable,
    dataset: &EmbeddingDataset,
    j_null: f64,
) -> f64 {
    let top = table.top_samples(feature, TOP_SAMPLES);
    if top.len() < 2 || j_null >= 1.0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, &(ra, _)) in top.iter().enumerate() {
        for &(rb, _) in &top[a + 1..] {
            total += jaccard(dataset.record(ra).organ_set(), dataset.record(rb).organ_set());
            count += 1;
        }
    }
    let mean = total / count as f64;
    ((mean - j_null) / (1.0 - j_null)).clamp(0.0, 1.0)
}

pub fn coherence(
    feature: usize,
    table: &FeatureActivationTable,
    dataset: &EmbeddingDataset,
    null_pairs: usize,
    seed: u64,
) -> f64 {
    let j_null = null_jaccard(dataset, &table.eval_indices, null_pairs, seed);
    coherence_with_null(feature, table, dataset, j_null)
}

pub fn specificity(feature: usize, table: &FeatureActivationTable, dataset: &EmbeddingDataset) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (rec, _) in table.top_samples(feature, TOP_SAMPLES) {
        for organ in dataset.record(rec).organ_set() {
            *counts.entry(organ.as_str()).or_default() += 1;
        }
    }
    let pooled: usize = counts.values().sum();
    if pooled == 0 {
        return 0.0;
    }
    if counts.len() == 1 {
        return 1.0;
    }
    let vocab = dataset.organ_vocabulary().len().max(counts.len());
    let entropy: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / pooled as f64;
            -p * p.ln()
        })
        .sum();
    (1.0 - entropy / (vocab as f64).ln()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: usize,
    pub coherence: f64,
    pub specificity: f64,
    pub m: f64,
}

/// Scores every feature of the table; features with fewer than two
/// activating samples get `M = 0`.
pub fn score_features(
    table: &FeatureActivationTable,
    dataset: &EmbeddingDataset,
    null_pairs: usize,
    seed: u64,
) -> Vec<FeatureScore> {
    let j_null = null_jaccard(dataset, &table.eval_indices, null_pairs, seed);
    (0..table.dict_size())
        .map(|feature| {
            let active = table.features[feature].len();
            let c = coherence_with_null(feature, table, dataset, j_null);
            let s = specificity(feature, table, dataset);
            let m = if active < 2 { 0.0 } else { c * s };
            FeatureScore {
                feature,
                coherence: c,
                specificity: s,
                m,
            }
        })
        .collect()
}

/// Mean `M` over the ten best-scoring features.
pub fn monosemanticity_config(scores: &[FeatureScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Invalid("no feature scores".into()));
    }
    let mut ms: Vec<f64> = scores.iter().map(|s| s.m).collect();
    ms.sort_by(|a, b| b.total_cmp(a));
    ms.truncate(TOP_FEATURES);
    Ok(ms.iter().sum::<f64>() / ms.len() as f64)
}

/// One evaluated configuration, one line of a report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub id: String,
    pub dict_sizes: Vec<usize>,
    pub k_values: Vec<usize>,
    pub seed: u64,
    pub r2: f64,
    pub mean_l0: f64,
    pub alive: usize,
    pub m_config: f64,
    pub dense_auc: f64,
    pub sparse_auc: f64,
    /// Top-N performance recovery ratio, keyed by N.
    pub recovery: BTreeMap<usize, f64>,
}

impl ConfigResult {
    pub fn recovery_at(&self, n: usize) -> f64 {
        self.recovery.get(&n).copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Position of a configuration in the combined ranking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedConfig {
    pub id: String,
    pub mono_rank: usize,
    pub perf_rank: usize,
    pub combined: usize,
    pub final_rank: usize,
}

/// The N at which performance recovery enters the ranking.
pub const RANKING_RECOVERY_N: usize = 10;

/// Competition ranks ("1224") of `values`, largest first.
fn descending_ranks(values: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|v| 1 + values.iter().filter(|w| w.total_cmp(v).is_gt()).count())
        .collect()
}

/// Orders configurations by `mono_rank + perf_rank`, ties by mono rank then id.
pub fn combine_ranks(entries: &[(String, usize, usize)]) -> Vec<RankedConfig> {
    let mut out: Vec<RankedConfig> = entries
        .iter()
        .map(|(id, mono, perf)| RankedConfig {
            id: id.clone(),
            mono_rank: *mono,
            perf_rank: *perf,
            combined: mono + perf,
            final_rank: 0,
        })
        .collect();
    out.sort_by(|a, b| {
        a.combined
            .cmp(&b.combined)
            .then(a.mono_rank.cmp(&b.mono_rank))
            .then(a.id.cmp(&b.id))
    });
    for (i, r) in out.iter_mut().enumerate() {
        r.final_rank = i + 1;
    }
    out
}

/// Ranks by `m_config` and by recovery at N = 10 (both descending), then
/// combines the two ranks.
pub fn rank_configs(results: &[ConfigResult]) -> Result<Vec<RankedConfig>> {
    if results.is_empty() {
        return Err(Error::Invalid("no configurations to rank".into()));
    }
    let mono = descending_ranks(&results.iter().map(|r| r.m_config).collect::<Vec<_>>());
    let perf = descending_ranks(
        &results
            .iter()
            .map(|r| r.recovery_at(RANKING_RECOVERY_N))
            .collect::<Vec<_>>(),
    );
    let entries: Vec<(String, usize, usize)> = results
        .iter()
        .zip(mono.into_iter().zip(perf))
        .map(|(r, (m, p))| (r.id.clone(), m, p))
        .collect();
    Ok(combine_ranks(&entries))
}
