//! Glue from a trained checkpoint to report rows, feature scores and
//! retrieval indices.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{self, ConfigResult, FeatureActivationTable, FeatureScore};
use crate::probe::{self, AbsWeightSelector, LogisticOptions};
use crate::retrieval::{self, RetrievalIndex};
use crate::sae::{self, SparseCode};
use crate::store::format::EmbBlock;
use crate::store::{EmbeddingDataset, SplitAssignment};
use crate::trainer::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub min_prevalence: f64,
    /// Top-N values for performance recovery; values above the dictionary
    /// size are skipped.
    pub recovery_n: Vec<usize>,
    pub null_pairs: usize,
    pub seed: u64,
    pub probe: LogisticOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            min_prevalence: 0.05,
            recovery_n: vec![1, 3, 10, 50],
            null_pairs: metrics::DEFAULT_NULL_PAIRS,
            seed: 0,
            probe: LogisticOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub result: ConfigResult,
    pub table: FeatureActivationTable,
    pub scores: Vec<FeatureScore>,
}

/// Densified final-level codes, row `r` for record `r`; rows outside
/// `indices` stay zero.
fn code_matrix(indices: &[usize], codes: &[SparseCode], n: usize, width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, width));
    for (&r, c) in indices.iter().zip(codes) {
        for &(j, v) in &c.entries {
            m[[r, j]] = v;
        }
    }
    m
}

/// Evaluates on the split's evaluation rows; probes train on its train rows.
pub fn evaluate_checkpoint(
    id: &str,
    seed: u64,
    cp: &Checkpoint,
    dataset: &EmbeddingDataset,
    split: &SplitAssignment,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let cfg = &cp.sae_config;
    let train = split.train_indices(dataset)?;
    let eval = split.eval_indices(dataset)?;

    let eval_codes = metrics::encode_final_level(&cp.params, cfg, dataset, &eval)?;
    let x = dataset.matrix(&eval);
    let x_hat = sae::decode(&cp.params, &eval_codes)?;
    let r2 = metrics::r_squared(x.view(), x_hat.view())?;
    let sparsity = metrics::sparsity_stats(&eval_codes);

    let table = FeatureActivationTable::from_codes(&eval, &eval_codes, cfg.max_dict());
    let scores = metrics::score_features(&table, dataset, opts.null_pairs, opts.seed);
    let m_config = metrics::monosemanticity_config(&scores)?;

    let tasks = probe::build_tasks(dataset, &train, opts.min_prevalence)?;
    let dense = dataset.matrix(&dataset.all_indices());
    let dense_eval = probe::downstream_eval(dense.view(), &tasks, &train, &eval, &opts.probe)?;

    let mut rows: Vec<usize> = train.iter().chain(&eval).copied().collect();
    rows.sort_unstable();
    let codes = metrics::encode_final_level(&cp.params, cfg, dataset, &rows)?;
    let sparse = code_matrix(&rows, &codes, dataset.len(), cfg.max_dict());
    let sparse_eval = probe::downstream_eval(sparse.view(), &tasks, &train, &eval, &opts.probe)?;
    let n_list: Vec<usize> = opts
        .recovery_n
        .iter()
        .copied()
        .filter(|&n| n >= 1 && n <= cfg.max_dict())
        .collect();
    let recovery = if n_list.is_empty() {
        BTreeMap::new()
    } else {
        probe::performance_recovery(
            sparse.view(),
            dense_eval.mean_auc,
            &tasks,
            &train,
            &eval,
            &n_list,
            &AbsWeightSelector,
            &opts.probe,
        )?
    };

    Ok(Evaluation {
        result: ConfigResult {
            id: id.to_owned(),
            dict_sizes: cfg.dict_sizes.clone(),
            k_values: cfg.k_values.clone(),
            seed,
            r2,
            mean_l0: sparsity.mean_l0,
            alive: sparsity.alive,
            m_config,
            dense_auc: dense_eval.mean_auc,
            sparse_auc: sparse_eval.mean_auc,
            recovery,
        },
        table,
        scores,
    })
}

/// Index over `indices` with untruncated final-level fingerprints.
pub fn build_index(cp: &Checkpoint, dataset: &EmbeddingDataset, indices: &[usize]) -> Result<RetrievalIndex> {
    let cfg = &cp.sae_config;
    let codes = metrics::encode_final_level(&cp.params, cfg, dataset, indices)?;
    let fingerprints = codes.iter().map(|c| retrieval::fingerprint(c, cfg.max_dict())).collect();
    let ids = indices
        .iter()
        .map(|&i| dataset.record(i).sample_id().to_owned())
        .collect();
    let mut data = Vec::with_capacity(indices.len() * dataset.d());
    for &i in indices {
        data.extend_from_slice(&dataset.record(i).embedding);
    }
    let dense = EmbBlock {
        d: dataset.d(),
        n: indices.len(),
        data,
    };
    RetrievalIndex::new(ids, fingerprints, dense)
}
