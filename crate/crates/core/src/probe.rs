//! Linear probes: per-organ binary tasks, L2-regularized logistic regression,
//! ROC-AUC and top-N performance recovery.
//!
//! Representations passed here are matrices whose row `r` belongs to dataset
//! record `r`; only the rows named by the train/val index lists are read.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingDataset;

/// One organ-presence classification task over the whole dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub organ: String,
    /// Record indices whose organ set contains `organ`.
    pub positives: BTreeSet<usize>,
    pub negatives: BTreeSet<usize>,
}

impl ProbeTask {
    pub fn labels(&self, indices: &[usize]) -> Vec<bool> {
        indices.iter().map(|i| self.positives.contains(i)).collect()
    }
}

/// One task per organ whose positive rate on `train` lies in
/// `[min_prevalence, 1 - min_prevalence]`.
pub fn build_tasks(dataset: &EmbeddingDataset, train: &[usize], min_prevalence: f64) -> Result<Vec<ProbeTask>> {
    if !(min_prevalence > 0.0 && min_prevalence <= 0.5) {
        return Err(Error::Config(format!("min_prevalence {min_prevalence} outside (0, 0.5]")));
    }
    if train.is_empty() {
        return Err(Error::Dataset("no training samples for probe tasks".into()));
    }
    let mut tasks = Vec::new();
    for organ in dataset.organ_vocabulary() {
        let hits = train
            .iter()
            .filter(|&&i| dataset.record(i).organ_set().contains(organ))
            .count();
        let rate = hits as f64 / train.len() as f64;
        if rate < min_prevalence || rate > 1.0 - min_prevalence {
            continue;
        }
        let (positives, negatives): (BTreeSet<usize>, BTreeSet<usize>) =
            (0..dataset.len()).partition(|&i| dataset.record(i).organ_set().contains(organ));
        tasks.push(ProbeTask {
            organ: organ.clone(),
            positives,
            negatives,
        });
    }
    if tasks.is_empty() {
        return Err(Error::Dataset("no organ meets the prevalence threshold".into()));
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticOptions {
    pub l2: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iters: 500,
            tol: 1e-7,
        }
    }
}

/// Logistic model over standardized columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// Weights on standardized columns; constant columns keep weight 0.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    /// Column standard deviations, 0 for constant columns.
    pub scale: Vec<f64>,
    /// Original column indices the model was trained on, if restricted.
    pub subset: Option<Vec<usize>>,
}

impl ProbeModel {
    /// Decision value for each row of `x` (columns as at training time).
    pub fn decision(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| {
                let mut z = self.bias;
                for (j, &v) in row.iter().enumerate() {
                    if self.scale[j] > 0.0 {
                        z += self.weights[j] * (v - self.mean[j]) / self.scale[j];
                    }
                }
                z
            })
            .collect()
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss plus `l2/2 ||w||^2` on a standardized design.
fn objective(xs: &Array2<f64>, y: &[bool], w: &Array1<f64>, b: f64, l2: f64) -> f64 {
    let z = xs.dot(w);
    let n = y.len() as f64;
    let data: f64 = z
        .iter()
        .zip(y)
        .map(|(&zi, &yi)| if yi { softplus(-(zi + b)) } else { softplus(zi + b) })
        .sum();
    data / n + 0.5 * l2 * w.dot(w)
}

fn gradient(xs: &Array2<f64>, y: &[bool], w: &Array1<f64>, b: f64, l2: f64) -> (Array1<f64>, f64) {
    let z = xs.dot(w);
    let n = y.len() as f64;
    let r: Array1<f64> = z
        .iter()
        .zip(y)
        .map(|(&zi, &yi)| (sigmoid(zi + b) - if yi { 1.0 } else { 0.0 }) / n)
        .collect();
    let gw = xs.t().dot(&r) + l2 * w;
    (gw, r.sum())
}

/// Fits by gradient descent with Armijo backtracking. Deterministic.
pub fn train_logistic(x: ArrayView2<f64>, y: &[bool], opts: &LogisticOptions) -> Result<ProbeModel> {
    train_logistic_traced(x, y, opts).map(|(m, _)| m)
}

/// [`train_logistic`] plus the objective after every accepted step,
/// starting with the initial value.
pub fn train_logistic_traced(x: ArrayView2<f64>, y: &[bool], opts: &LogisticOptions) -> Result<(ProbeModel, Vec<f64>)> {
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} labels", y.len())));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == n {
        return Err(Error::Invalid("logistic probe needs both classes".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe features".into()));
    }
    if opts.l2.is_nan() || opts.l2 < 0.0 || opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::Config("probe l2 must be >= 0 and tol > 0".into()));
    }

    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let mut scale = vec![0.0; p];
    for (j, col) in x.columns().into_iter().enumerate() {
        let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64;
        // Columns constant up to rounding would standardize to noise.
        if var > 1e-24 * (1.0 + mean[j] * mean[j]) {
            scale[j] = var.sqrt();
        }
    }
    let active: Vec<usize> = (0..p).filter(|&j| scale[j] > 0.0).collect();
    let mut xs = Array2::<f64>::zeros((n, active.len()));
    for (c, &j) in active.iter().enumerate() {
        for i in 0..n {
            xs[[i, c]] = (x[[i, j]] - mean[j]) / scale[j];
        }
    }

    let mut w = Array1::<f64>::zeros(active.len());
    let mut b = {
        let rate = pos as f64 / n as f64;
        (rate / (1.0 - rate)).ln()
    };
    let mut f = objective(&xs, y, &w, b, opts.l2);
    let mut trace = vec![f];
    let mut step = 1.0;
    for _ in 0..opts.max_iters {
        let (gw, gb) = gradient(&xs, y, &w, b, opts.l2);
        let g2 = gw.dot(&gw) + gb * gb;
        if g2.sqrt() < opts.tol {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let w_new = &w - &(step * &gw);
            let b_new = b - step * gb;
            let f_new = objective(&xs, y, &w_new, b_new, opts.l2);
            if f_new <= f - 0.5 * step * g2 {
                w = w_new;
                b = b_new;
                f = f_new;
                trace.push(f);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step *= 2.0;
    }

    let mut weights = vec![0.0; p];
    for (c, &j) in active.iter().enumerate() {
        weights[j] = w[c];
    }
    if weights.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::NonFinite("probe weights".into()));
    }
    let model = ProbeModel {
        weights,
        bias: b,
        mean: mean.to_vec(),
        scale,
        subset: None,
    };
    Ok((model, trace))
}

/// Normalized Mann-Whitney U with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("ROC-AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are doubled so tied groups stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u128;
        for &o in &order[i..=j] {
            if labels[o] {
                rank_sum2 += avg2;
            }
        }
        i = j + 1;
    }
    let u2 = rank_sum2 - (n_pos as u128) * (n_pos as u128 + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

fn take_rows(rep: ArrayView2<f64>, rows: &[usize], cols: Option<&[usize]>) -> Array2<f64> {
    match cols {
        None => rep.select(Axis(0), rows),
        Some(cols) => rep.select(Axis(0), rows).select(Axis(1), cols),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAuc {
    pub organ: String,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEval {
    pub mean_auc: f64,
    pub tasks: Vec<TaskAuc>,
    /// Organs skipped because train or val held a single class.
    pub skipped: Vec<String>,
}

fn usable(task: &ProbeTask, train: &[usize], val: &[usize]) -> bool {
    let two = |ids: &[usize]| {
        let pos = ids.iter().filter(|i| task.positives.contains(i)).count();
        pos > 0 && pos < ids.len()
    };
    two(train) && two(val)
}

fn fit_and_score(
    rep: ArrayView2<f64>,
    task: &ProbeTask,
    train: &[usize],
    val: &[usize],
    cols: Option<&[usize]>,
    opts: &LogisticOptions,
) -> Result<(ProbeModel, f64)> {
    let xt = take_rows(rep, train, cols);
    let mut model = train_logistic(xt.view(), &task.labels(train), opts)?;
    model.subset = cols.map(<[usize]>::to_vec);
    let xv = take_rows(rep, val, cols);
    let auc = roc_auc(&model.decision(xv.view()), &task.labels(val))?;
    Ok((model, auc))
}

/// Mean validation ROC-AUC over tasks, one probe per task fit on `train`.
pub fn downstream_eval(
    rep: ArrayView2<f64>,
    tasks: &[ProbeTask],
    train: &[usize],
    val: &[usize],
    opts: &LogisticOptions,
) -> Result<ProbeEval> {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for task in tasks {
        if !usable(task, train, val) {
            warn!("probe task {} has a single class on train or val; skipped", task.organ);
            skipped.push(task.organ.clone());
            continue;
        }
        let (_, auc) = fit_and_score(rep, task, train, val, None, opts)?;
        out.push(TaskAuc {
            organ: task.organ.clone(),
            auc,
        });
    }
    if out.is_empty() {
        return Err(Error::Dataset("no probe task has both classes on train and val".into()));
    }
    let mean_auc = out.iter().map(|t| t.auc).sum::<f64>() / out.len() as f64;
    Ok(ProbeEval {
        mean_auc,
        tasks: out,
        skipped,
    })
}

/// Chooses the `n` columns a restricted probe may use.
pub trait FeatureSelector {
    fn select(&self, model: &ProbeModel, n: usize) -> Vec<usize>;
}

/// Largest `|standardized weight|`, ties by column index.
#[derive(Debug, Clone, Copy, Default)]
pub struct AbsWeightSelector;

impl FeatureSelector for AbsWeightSelector {
    fn select(&self, model: &ProbeModel, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..model.weights.len()).collect();
        idx.sort_by(|&a, &b| {
            model.weights[b]
                .abs()
                .total_cmp(&model.weights[a].abs())
                .then(a.cmp(&b))
        });
        idx.truncate(n);
        idx.sort_unstable();
        idx
    }
}

/// Mean restricted-probe AUC at each `N`, divided by `dense_auc`.
#[allow(clippy::too_many_arguments)]
pub fn performance_recovery(
    codes: ArrayView2<f64>,
    dense_auc: f64,
    tasks: &[ProbeTask],
    train: &[usize],
    val: &[usize],
    n_list: &[usize],
    selector: &dyn FeatureSelector,
    opts: &LogisticOptions,
) -> Result<BTreeMap<usize, f64>> {
    let p = codes.ncols();
    if let Some(&bad) = n_list.iter().find(|&&n| n == 0 || n > p) {
        return Err(Error::Config(format!("top-N {bad} outside 1..={p}")));
    }
    if dense_auc.is_nan() || dense_auc <= 0.0 {
        return Err(Error::Invalid(format!("dense AUC {dense_auc} is not positive")));
    }
    let mut sums: BTreeMap<usize, f64> = n_list.iter().map(|&n| (n, 0.0)).collect();
    let mut used = 0usize;
    for task in tasks {
        if !usable(task, train, val) {
            continue;
        }
        used += 1;
        let xt = take_rows(codes, train, None);
        let full = train_logistic(xt.view(), &task.labels(train), opts)?;
        for (&n, sum) in sums.iter_mut() {
            let mut cols = selector.select(&full, n);
            cols.truncate(n);
            let (_, auc) = fit_and_score(codes, task, train, val, Some(&cols), opts)?;
            *sum += auc;
        }
    }
    if used == 0 {
        return Err(Error::Dataset("no probe task has both classes on train and val".into()));
    }
    Ok(sums
        .into_iter()
        .map(|(n, s)| (n, s / used as f64 / dense_auc))
        .collect())
}

/// Performance retained relative to a dense baseline.
pub fn recovery_ratio(restricted: f64, dense: f64) -> f64 {
    restricted / dense
}
