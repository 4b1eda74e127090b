//! Optimization loop: Adam with cosine-annealed learning rate, JumpReLU
//! threshold tracking, checkpoints and configuration sweeps.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sae::{self, Gradients, SaeConfig, SaeParams};
use crate::store::{self, EmbeddingDataset, SplitAssignment};

mod checkpoint;
mod sweep;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use sweep::{enumerate_sweep, SweepEntry, SweepSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub threshold_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_min: 1e-6,
            epochs: 100,
            batch_size: 2048,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            threshold_momentum: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr0, got lr_min={} lr0={}",
                self.lr_min, self.lr0
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.threshold_momentum) {
            return Err(Error::Config("threshold_momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2`
pub fn lr_schedule(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let frac = (step as f64 / total).min(1.0);
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// First/second moment accumulators for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Hyperparameters of one Adam update.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Bias-corrected Adam update of one flat tensor at (1-based) step `t`.
pub fn adam_update(param: &mut [f64], grad: &[f64], moments: &mut Moments, t: u64, hp: AdamHyper) {
    let t = t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Adam state for the three optimized SAE tensors. Thresholds are not
/// optimized here.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub w: Moments,
    pub b_pre: Moments,
    pub b_enc: Moments,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &SaeParams) -> Self {
        Self {
            w: Moments::zeros(params.w.len()),
            b_pre: Moments::zeros(params.b_pre.len()),
            b_enc: Moments::zeros(params.b_enc.len()),
            step: 0,
        }
    }
}

pub fn adam_step(
    state: &mut AdamState,
    params: &mut SaeParams,
    grads: &Gradients,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if grads.w.dim() != params.w.dim()
        || grads.b_pre.len() != params.b_pre.len()
        || grads.b_enc.len() != params.b_enc.len()
        || state.w.m.len() != params.w.len()
    {
        return Err(Error::Shape("gradient/optimizer shapes do not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient at optimizer step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let hp = AdamHyper {
        lr,
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: config.adam_eps,
    };
    adam_update(
        as_slice_mut2(&mut params.w),
        as_slice2(&grads.w),
        &mut state.w,
        state.step,
        hp,
    );
    adam_update(
        as_slice_mut1(&mut params.b_pre),
        as_slice1(&grads.b_pre),
        &mut state.b_pre,
        state.step,
        hp,
    );
    adam_update(
        as_slice_mut1(&mut params.b_enc),
        as_slice1(&grads.b_enc),
        &mut state.b_enc,
        state.step,
        hp,
    );
    Ok(())
}

fn as_slice_mut2(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

fn as_slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("gradient tensors are contiguous")
}

fn as_slice_mut1(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

fn as_slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("gradient tensors are contiguous")
}

/// Everything needed to resume evaluation of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub sae_config: SaeConfig,
    pub params: SaeParams,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub final_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Per-epoch thresholds, `threshold_trace[epoch][level]`.
    pub threshold_trace: Vec<Vec<f64>>,
}

/// Batch-size-weighted mean training-mode loss over the given rows, in
/// dataset order.
pub fn mean_loss(
    params: &SaeParams,
    config: &SaeConfig,
    dataset: &EmbeddingDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = dataset.matrix(chunk);
        total += sae::forward_train(params, x.view(), config)?.loss * chunk.len() as f64;
    }
    Ok(total / indices.len().max(1) as f64)
}

pub fn train(
    dataset: &EmbeddingDataset,
    split: &SplitAssignment,
    sae_config: &SaeConfig,
    train_config: &TrainConfig,
) -> Result<Checkpoint> {
    sae_config.validate()?;
    train_config.validate()?;
    if sae_config.input_dim != dataset.d() {
        return Err(Error::Config(format!(
            "SAE input_dim {} does not match dataset d {}",
            sae_config.input_dim,
            dataset.d()
        )));
    }
    let train_idx = split.train_indices(dataset)?;
    if train_idx.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }
    let val_idx = split.val_indices(dataset)?;

    let mean = store::dataset_mean(dataset, &train_idx)?;
    let mut params = sae::init_params(sae_config, train_config.seed, &mean)?;
    let mut adam = AdamState::new(&params);

    let steps_per_epoch = train_idx.len().div_ceil(train_config.batch_size);
    let total_steps = train_config.epochs * steps_per_epoch;
    let mut step = 0usize;
    let mut train_loss = Vec::with_capacity(train_config.epochs);
    let mut val_loss = Vec::with_capacity(train_config.epochs);
    let mut threshold_trace = Vec::with_capacity(train_config.epochs);

    for epoch in 0..train_config.epochs {
        let mut epoch_total = 0.0;
        let batches = store::iterate_batches(
            dataset,
            &train_idx,
            train_config.batch_size,
            train_config.seed,
            epoch as u64,
        )?;
        for batch in batches {
            let (fwd, grads) = sae::forward_backward(&params, batch.x.view(), sae_config)?;
            if !fwd.loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss {} in epoch {epoch}", fwd.loss),
                });
            }
            let lr = lr_schedule(step, total_steps, train_config.lr0, train_config.lr_min);
            adam_step(&mut adam, &mut params, &grads, lr, train_config).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Divergence { step, detail },
                other => other,
            })?;
            sae::update_thresholds(&mut params, &fwd.min_kept, train_config.threshold_momentum)?;
            epoch_total += fwd.loss * batch.indices.len() as f64;
            step += 1;
        }
        train_loss.push(epoch_total / train_idx.len() as f64);
        if !val_idx.is_empty() {
            let v = mean_loss(&params, sae_config, dataset, &val_idx, train_config.batch_size)?;
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("validation loss {v} after epoch {epoch}"),
                });
            }
            val_loss.push(v);
        }
        threshold_trace.push(params.thresholds.clone());
        log::debug!("epoch {epoch}: train loss {:.6e}", train_loss[epoch]);
    }

    Ok(Checkpoint {
        sae_config: sae_config.clone(),
        params,
        train_config: train_config.clone(),
        epoch: train_config.epochs,
        final_loss: *train_loss.last().expect("epochs >= 1"),
        train_loss,
        val_loss,
        threshold_trace,
    })
}
