//! Matryoshka sparse autoencoder.
//!
//! One shared encoder produces `D_L` pre-activations; level `l` only sees the
//! first `D_l` of them. The decoder is tied to the encoder: feature `j`
//! decodes along `W_j / |W_j|`. Training sparsifies each level with
//! BatchTopK; inference uses a per-level JumpReLU threshold that tracks the
//! smallest activation BatchTopK kept during training.
//!
//! ```text
//! z      = relu(W (x - b_pre) + b_enc)
//! x_hat  = b_pre + sum_{j in S_l} z_j * W_j / |W_j|
//! loss   = 1/L * sum_l mean((x_hat_l - x)^2)
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub input_dim: usize,
    pub dict_sizes: Vec<usize>,
    pub k_values: Vec<usize>,
}

impl SaeConfig {
    pub fn new(input_dim: usize, dict_sizes: Vec<usize>, k_values: Vec<usize>) -> Result<Self> {
        let cfg = Self {
            input_dim,
            dict_sizes,
            k_values,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.dict_sizes.is_empty() {
            return Err(Error::Config("at least one dictionary level is required".into()));
        }
        if self.k_values.len() != self.dict_sizes.len() {
            return Err(Error::Config(format!(
                "{} k values for {} dictionary levels",
                self.k_values.len(),
                self.dict_sizes.len()
            )));
        }
        if self.dict_sizes[0] == 0 || self.dict_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "dict_sizes must be positive and strictly increasing: {:?}",
                self.dict_sizes
            )));
        }
        for (level, (&k, &size)) in self.k_values.iter().zip(&self.dict_sizes).enumerate() {
            if k == 0 || k > size {
                return Err(Error::Config(format!(
                    "level {}: k={k} must lie in [1, {size}]",
                    level + 1
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.dict_sizes.len()
    }

    /// Size of the full (last-level) dictionary.
    pub fn max_dict(&self) -> usize {
        *self.dict_sizes.last().expect("validated config has a level")
    }

    /// Dictionary prefix length of a 1-based level.
    pub fn dict_size(&self, level: usize) -> usize {
        self.dict_sizes[level - 1]
    }

    pub fn k(&self, level: usize) -> usize {
        self.k_values[level - 1]
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.levels() {
            Err(Error::Invalid(format!(
                "level {level} outside [1, {}]",
                self.levels()
            )))
        } else {
            Ok(())
        }
    }
}

/// Learnable tensors plus the JumpReLU threshold state.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// `D_L x d`; row `j` is feature `j`'s encoder row and (normalized) decoder column.
    pub w: Array2<f64>,
    pub b_pre: Array1<f64>,
    pub b_enc: Array1<f64>,
    /// One JumpReLU threshold per level.
    pub thresholds: Vec<f64>,
    /// Un-debiased EMA accumulators backing `thresholds`.
    pub threshold_state: Vec<f64>,
    pub threshold_steps: u64,
}

impl SaeParams {
    pub fn dict_size(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.w.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
    }

    /// Unit-norm decoder directions, one per row.
    pub fn decoder(&self) -> Array2<f64> {
        let mut dec = self.w.clone();
        for mut row in dec.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        dec
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b_pre).chain(&self.b_enc).all(|v| v.is_finite())
            && self.thresholds.iter().all(|t| t.is_finite() && *t >= 0.0)
    }

    fn check(&self, config: &SaeConfig) -> Result<()> {
        if self.w.dim() != (config.max_dict(), config.input_dim)
            || self.b_pre.len() != config.input_dim
            || self.b_enc.len() != config.max_dict()
            || self.thresholds.len() != config.levels()
        {
            return Err(Error::Shape(format!(
                "parameters (W {:?}, b_pre {}, b_enc {}, {} thresholds) do not match config {:?}",
                self.w.dim(),
                self.b_pre.len(),
                self.b_enc.len(),
                self.thresholds.len(),
                config
            )));
        }
        Ok(())
    }
}

/// Active features of one sample at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    pub level: usize,
    /// `(feature_index, activation)`, strictly increasing indices, positive values.
    pub entries: Vec<(usize, f64)>,
}

impl SparseCode {
    pub fn empty(level: usize) -> Self {
        Self {
            level,
            entries: Vec::new(),
        }
    }

    pub fn l0(&self) -> usize {
        self.entries.len()
    }
}

/// Gaussian rows scaled to unit norm, `b_pre` at the data mean, zero biases
/// and thresholds.
pub fn init_params(config: &SaeConfig, seed: u64, data_mean: &[f64]) -> Result<SaeParams> {
    config.validate()?;
    if data_mean.len() != config.input_dim {
        return Err(Error::Shape(format!(
            "data mean has length {}, expected {}",
            data_mean.len(),
            config.input_dim
        )));
    }
    if data_mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("data mean".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::<f64>::zeros((config.max_dict(), config.input_dim));
    for mut row in w.rows_mut() {
        loop {
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let n = row.dot(&row).sqrt();
            if n > 1e-12 {
                row /= n;
                break;
            }
        }
    }
    Ok(SaeParams {
        w,
        b_pre: Array1::from(data_mean.to_vec()),
        b_enc: Array1::zeros(config.max_dict()),
        thresholds: vec![0.0; config.levels()],
        threshold_state: vec![0.0; config.levels()],
        threshold_steps: 0,
    })
}

/// `relu(W (x - b_pre) + b_enc)` for every row of `x`.
pub fn encode_pre(params: &SaeParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, SAE expects {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    let centered = &x - &params.b_pre;
    let mut z = centered.dot(&params.w.t());
    z += &params.b_enc;
    z.mapv_inplace(|v| v.max(0.0));
    Ok(z)
}

/// Keeps the `k_level * B` largest positive activations of the level's
/// prefix across the whole batch. Ties at the cutoff go to the smaller row,
/// then the smaller column.
pub fn batch_topk(preacts: ArrayView2<f64>, level: usize, config: &SaeConfig) -> Result<Vec<SparseCode>> {
    config.check_level(level)?;
    let width = config.dict_size(level);
    if preacts.ncols() < width {
        return Err(Error::Shape(format!(
            "pre-activations have {} columns, level {level} needs {width}",
            preacts.ncols()
        )));
    }
    let rows = preacts.nrows();
    // (value, row * width + col): flat order equals (row, col) order
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for (i, row) in preacts.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().take(width).enumerate() {
            if v > 0.0 {
                cand.push((v, i * width + j));
            }
        }
    }
    let budget = config.k(level).saturating_mul(rows);
    if cand.len() > budget {
        cand.select_nth_unstable_by(budget, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cand.truncate(budget);
    }

    let mut codes: Vec<SparseCode> = (0..rows).map(|_| SparseCode::empty(level)).collect();
    cand.sort_unstable_by_key(|c| c.1);
    for (v, flat) in cand {
        codes[flat / width].entries.push((flat % width, v));
    }
    Ok(codes)
}

/// `b_pre + sum value * W_j / |W_j|` per code.
pub fn decode(params: &SaeParams, codes: &[SparseCode]) -> Result<Array2<f64>> {
    let norms = params.row_norms();
    decode_with_norms(params, codes, &norms)
}

fn decode_with_norms(params: &SaeParams, codes: &[SparseCode], norms: &[f64]) -> Result<Array2<f64>> {
    let mut out = Array2::<f64>::zeros((codes.len(), params.input_dim()));
    for (mut row, code) in out.rows_mut().into_iter().zip(codes) {
        row.assign(&params.b_pre);
        for &(j, v) in &code.entries {
            if j >= params.dict_size() {
                return Err(Error::Invalid(format!(
                    "feature index {j} out of bounds for dictionary of {}",
                    params.dict_size()
                )));
            }
            if norms[j] > 0.0 {
                row.scaled_add(v / norms[j], &params.w.row(j));
            }
        }
    }
    Ok(out)
}

/// Result of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `codes[l][i]`: sample `i` at level `l + 1`.
    pub codes: Vec<Vec<SparseCode>>,
    pub reconstructions: Vec<Array2<f64>>,
    pub level_mse: Vec<f64>,
    pub loss: f64,
    /// Smallest activation BatchTopK kept per level (previous threshold when none).
    pub min_kept: Vec<f64>,
}

pub fn forward_train(params: &SaeParams, x: ArrayView2<f64>, config: &SaeConfig) -> Result<ForwardOutput> {
    params.check(config)?;
    if x.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let z = encode_pre(params, x)?;
    let norms = params.row_norms();
    let elems = (x.nrows() * x.ncols()) as f64;

    let mut out = ForwardOutput {
        codes: Vec::with_capacity(config.levels()),
        reconstructions: Vec::with_capacity(config.levels()),
        level_mse: Vec::with_capacity(config.levels()),
        loss: 0.0,
        min_kept: Vec::with_capacity(config.levels()),
    };
    for level in 1..=config.levels() {
        let codes = batch_topk(z.view(), level, config)?;
        let recon = decode_with_norms(params, &codes, &norms)?;
        let sse: f64 = recon.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let min_kept = codes
            .iter()
            .flat_map(|c| c.entries.iter().map(|e| e.1))
            .fold(f64::INFINITY, f64::min);
        out.min_kept.push(if min_kept.is_finite() {
            min_kept
        } else {
            params.thresholds[level - 1]
        });
        out.level_mse.push(sse / elems);
        out.codes.push(codes);
        out.reconstructions.push(recon);
    }
    out.loss = out.level_mse.iter().sum::<f64>() / config.levels() as f64;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Array2<f64>,
    pub b_pre: Array1<f64>,
    pub b_enc: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &SaeParams) -> Self {
        Self {
            w: Array2::zeros(params.w.raw_dim()),
            b_pre: Array1::zeros(params.b_pre.len()),
            b_enc: Array1::zeros(params.b_enc.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b_pre).chain(&self.b_enc).all(|v| v.is_finite())
    }
}

/// Gradients of [`forward_train`]'s loss with the TopK selections and ReLU
/// masks held at their forward values.
pub fn backward(params: &SaeParams, x: ArrayView2<f64>, config: &SaeConfig) -> Result<Gradients> {
    let fwd = forward_train(params, x, config)?;
    Ok(gradients_from(params, x, config, &fwd))
}

/// Forward pass plus gradients, sharing the forward computation.
pub fn forward_backward(
    params: &SaeParams,
    x: ArrayView2<f64>,
    config: &SaeConfig,
) -> Result<(ForwardOutput, Gradients)> {
    let fwd = forward_train(params, x, config)?;
    let grads = gradients_from(params, x, config, &fwd);
    Ok((fwd, grads))
}

fn gradients_from(params: &SaeParams, x: ArrayView2<f64>, config: &SaeConfig, fwd: &ForwardOutput) -> Gradients {
    let (b, d) = x.dim();
    let dict = params.dict_size();
    let scale = 2.0 / (config.levels() as f64 * b as f64 * d as f64);
    let norms = params.row_norms();
    let decoder = params.decoder();
    let centered = &x - &params.b_pre;

    let mut grads = Gradients::zeros_like(params);
    // dL/dd_j accumulated over every (sample, level) that used feature j
    let mut dec_grad = Array2::<f64>::zeros((dict, d));
    // dL/dz_ij summed over levels, kept sparse per sample
    let mut dz: Vec<Vec<(usize, f64)>> = vec![Vec::new(); b];

    for (codes, recon) in fwd.codes.iter().zip(&fwd.reconstructions) {
        let residual = (recon - &x) * scale;
        grads.b_pre += &residual.sum_axis(Axis(0));
        for (i, code) in codes.iter().enumerate() {
            let r = residual.row(i);
            for &(j, a) in &code.entries {
                dz[i].push((j, decoder.row(j).dot(&r)));
                dec_grad.row_mut(j).scaled_add(a, &r);
            }
        }
    }

    for (i, entries) in dz.iter().enumerate() {
        let xc = centered.row(i);
        for &(j, g) in entries {
            grads.b_enc[j] += g;
            grads.w.row_mut(j).scaled_add(g, &xc);
        }
    }
    // encoder path into b_pre: dz/db_pre = -W_j
    grads.b_pre -= &grads.b_enc.view().dot(&params.w);

    for (j, &norm) in norms.iter().enumerate().take(dict) {
        if norm == 0.0 {
            continue;
        }
        let q = dec_grad.row(j);
        let dj = decoder.row(j);
        let proj = dj.dot(&q);
        let mut gw = grads.w.row_mut(j);
        gw.scaled_add(1.0 / norm, &q);
        gw.scaled_add(-proj / norm, &dj);
    }
    grads
}

/// JumpReLU encoding of one sample: prefix activations above the level's threshold.
pub fn encode_inference(
    params: &SaeParams,
    x: ArrayView1<f64>,
    config: &SaeConfig,
    level: usize,
) -> Result<SparseCode> {
    config.check_level(level)?;
    params.check(config)?;
    let xm = x.insert_axis(Axis(0));
    let z = encode_pre(params, xm)?;
    Ok(threshold_row(z.row(0), config.dict_size(level), params.thresholds[level - 1], level))
}

/// [`encode_inference`] over every row of `x`.
pub fn encode_inference_batch(
    params: &SaeParams,
    x: ArrayView2<f64>,
    config: &SaeConfig,
    level: usize,
) -> Result<Vec<SparseCode>> {
    config.check_level(level)?;
    params.check(config)?;
    let z = encode_pre(params, x)?;
    let width = config.dict_size(level);
    let t = params.thresholds[level - 1];
    Ok(z.rows()
        .into_iter()
        .map(|row| threshold_row(row, width, t, level))
        .collect())
}

fn threshold_row(z: ArrayView1<f64>, width: usize, threshold: f64, level: usize) -> SparseCode {
    SparseCode {
        level,
        entries: z
            .iter()
            .take(width)
            .enumerate()
            .filter(|(_, &v)| v > threshold && v > 0.0)
            .map(|(j, &v)| (j, v))
            .collect(),
    }
}

/// Debiased EMA of the per-level minimum kept activation.
pub fn update_thresholds(params: &mut SaeParams, min_kept: &[f64], momentum: f64) -> Result<()> {
    if min_kept.len() != params.thresholds.len() {
        return Err(Error::Shape(format!(
            "{} minimum activations for {} levels",
            min_kept.len(),
            params.thresholds.len()
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
    }
    if let Some(v) = min_kept.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::NonFinite(format!("minimum kept activation {v}")));
    }
    params.threshold_steps += 1;
    let correction = 1.0 - momentum.powi(params.threshold_steps.min(i32::MAX as u64) as i32);
    for ((state, t), &m) in params
        .threshold_state
        .iter_mut()
        .zip(params.thresholds.iter_mut())
        .zip(min_kept)
    {
        *state = momentum * *state + (1.0 - momentum) * m;
        *t = *state / correction;
    }
    Ok(())
}

/// Densifies codes into an `n x width` matrix (inactive features are 0).
pub fn densify(codes: &[SparseCode], width: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((codes.len(), width));
    for (mut row, code) in out.rows_mut().into_iter().zip(codes) {
        for &(j, v) in &code.entries {
            if j < width {
                row[j] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(d: usize, sizes: &[usize], ks: &[usize]) -> SaeConfig {
        SaeConfig::new(d, sizes.to_vec(), ks.to_vec()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SaeConfig::new(4, vec![4, 4], vec![1, 1]).is_err());
        assert!(SaeConfig::new(4, vec![4, 8], vec![1]).is_err());
        assert!(SaeConfig::new(4, vec![4, 8], vec![5, 1]).is_err());
        assert!(SaeConfig::new(4, vec![], vec![]).is_err());
        assert!(SaeConfig::new(0, vec![2], vec![1]).is_err());
    }

    #[test]
    fn init_rows_are_unit_and_deterministic() {
        let c = cfg(5, &[4, 12], &[1, 3]);
        let p = init_params(&c, 3, &[0.0; 5]).unwrap();
        for n in p.row_norms() {
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(p, init_params(&c, 3, &[0.0; 5]).unwrap());
        assert!(p.b_pre.iter().all(|&v| v == 0.0));
        assert!(init_params(&c, 3, &[0.0; 4]).is_err());
    }

    #[test]
    fn encode_pre_identity_relu() {
        let c = cfg(2, &[2], &[1]);
        let mut p = init_params(&c, 0, &[0.0, 0.0]).unwrap();
        p.w = array![[1.0, 0.0], [0.0, 1.0]];
        let z = encode_pre(&p, array![[3.0, -2.0]].view()).unwrap();
        assert_eq!(z, array![[3.0, 0.0]]);
    }

    #[test]
    fn encode_pre_at_bias_is_zero() {
        let c = cfg(3, &[6], &[2]);
        let p = init_params(&c, 1, &[0.5, -1.0, 2.0]).unwrap();
        let z = encode_pre(&p, array![[0.5, -1.0, 2.0]].view()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn topk_hand_case() {
        let c = cfg(2, &[2], &[1]);
        let codes = batch_topk(array![[3.0, 1.0], [2.0, 5.0]].view(), 1, &c).unwrap();
        assert_eq!(codes[0].entries, vec![(0, 3.0)]);
        assert_eq!(codes[1].entries, vec![(1, 5.0)]);
    }

    #[test]
    fn topk_nonpositive_and_full_k() {
        let c = cfg(2, &[3], &[3]);
        let codes = batch_topk(array![[0.0, -1.0, 0.0], [-2.0, 0.0, -0.1]].view(), 1, &c).unwrap();
        assert!(codes.iter().all(|c| c.entries.is_empty()));
        let codes = batch_topk(array![[1.0, 2.0, 0.0], [4.0, 5.0, 6.0]].view(), 1, &c).unwrap();
        assert_eq!(codes[0].entries, vec![(0, 1.0), (1, 2.0)]);
        assert_eq!(codes[1].l0(), 3);
    }

    #[test]
    fn topk_ties_prefer_earlier_row_then_column() {
        let c = cfg(2, &[2], &[1]);
        let codes = batch_topk(array![[1.0, 1.0], [1.0, 1.0]].view(), 1, &c).unwrap();
        assert_eq!(codes[0].entries, vec![(0, 1.0), (1, 1.0)]);
        assert!(codes[1].entries.is_empty());
    }

    #[test]
    fn topk_respects_prefix_and_level_bounds() {
        let c = cfg(2, &[1, 3], &[1, 1]);
        let codes = batch_topk(array![[0.1, 9.0, 9.0]].view(), 1, &c).unwrap();
        assert_eq!(codes[0].entries, vec![(0, 0.1)]);
        assert!(batch_topk(array![[1.0, 1.0, 1.0]].view(), 3, &c).is_err());
        assert!(batch_topk(array![[1.0, 1.0, 1.0]].view(), 0, &c).is_err());
    }

    #[test]
    fn decode_cases() {
        let c = cfg(2, &[2], &[1]);
        let mut p = init_params(&c, 0, &[1.0, -1.0]).unwrap();
        p.w = array![[2.0, 0.0], [0.0, 1.0]];
        let out = decode(&p, &[SparseCode::empty(1)]).unwrap();
        assert_eq!(out, array![[1.0, -1.0]]);
        let out = decode(&p, &[SparseCode { level: 1, entries: vec![(0, 3.0)] }]).unwrap();
        assert_eq!(out, array![[1.0 + 3.0, -1.0]]);
        assert!(decode(&p, &[SparseCode { level: 1, entries: vec![(2, 1.0)] }]).is_err());
    }

    #[test]
    fn decode_is_invariant_to_row_rescaling() {
        let c = cfg(3, &[4], &[2]);
        let mut p = init_params(&c, 5, &[0.1, 0.2, 0.3]).unwrap();
        let code = SparseCode { level: 1, entries: vec![(1, 0.7), (3, 1.3)] };
        let before = decode(&p, std::slice::from_ref(&code)).unwrap();
        p.w.row_mut(1).mapv_inplace(|v| v * 4.5);
        let after = decode(&p, &[code]).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_loss_at_bias() {
        let c = cfg(3, &[4, 8], &[1, 2]);
        let p = init_params(&c, 2, &[1.0, 2.0, 3.0]).unwrap();
        let x = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        let fwd = forward_train(&p, x.view(), &c).unwrap();
        assert_eq!(fwd.loss, 0.0);
        let g = backward(&p, x.view(), &c).unwrap();
        assert_eq!(g, Gradients::zeros_like(&p));
    }

    #[test]
    fn unused_features_get_no_gradient() {
        let c = cfg(2, &[2, 3], &[1, 1]);
        let mut p = init_params(&c, 0, &[0.0, 0.0]).unwrap();
        p.w = array![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]];
        let x = array![[2.0, 0.5], [0.3, 1.0]];
        let g = backward(&p, x.view(), &c).unwrap();
        // feature 2 has negative pre-activation everywhere
        assert!(g.w.row(2).iter().all(|&v| v == 0.0));
        assert_eq!(g.b_enc[2], 0.0);
    }

    #[test]
    fn inference_thresholds() {
        let c = cfg(3, &[3], &[1]);
        let mut p = init_params(&c, 0, &[0.0; 3]).unwrap();
        p.w = Array2::eye(3);
        let x = array![0.4, 0.9, 0.1];
        let code = encode_inference(&p, x.view(), &c, 1).unwrap();
        assert_eq!(code.entries.len(), 3);
        p.thresholds[0] = 0.5;
        let code = encode_inference(&p, x.view(), &c, 1).unwrap();
        assert_eq!(code.entries, vec![(1, 0.9)]);
        p.thresholds[0] = 1e300;
        assert!(encode_inference(&p, x.view(), &c, 1).unwrap().entries.is_empty());
        assert!(encode_inference(&p, x.view(), &c, 2).is_err());
    }

    #[test]
    fn threshold_ema() {
        let c = cfg(2, &[2], &[1]);
        let mut p = init_params(&c, 0, &[0.0; 2]).unwrap();
        update_thresholds(&mut p, &[0.7], 0.0).unwrap();
        assert_eq!(p.thresholds, vec![0.7]);

        let mut p = init_params(&c, 0, &[0.0; 2]).unwrap();
        for _ in 0..2000 {
            update_thresholds(&mut p, &[0.3], 0.99).unwrap();
        }
        assert!((p.thresholds[0] - 0.3).abs() < 1e-9);
        assert!(update_thresholds(&mut p, &[f64::NAN], 0.9).is_err());
        assert!(update_thresholds(&mut p, &[0.1], 1.0).is_err());
    }

    #[test]
    fn densify_places_values() {
        let codes = vec![
            SparseCode { level: 1, entries: vec![(0, 1.0), (2, 3.0)] },
            SparseCode::empty(1),
        ];
        assert_eq!(densify(&codes, 3), array![[1.0, 0.0, 3.0], [0.0, 0.0, 0.0]]);
    }
}
