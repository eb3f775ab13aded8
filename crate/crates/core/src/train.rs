//! Shared training machinery: hyperparameters, the warmup/decay schedule,
//! the LR/BS statistic, AdamW, and the step loop used by every stage.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batches, BatchPlan, DataError};
use crate::graph::{Graph, Var};
use crate::model::ModelError;
use crate::tensor::{Tensor, TensorError};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("parameter/gradient/state shapes disagree: {0}")]
    Mismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("reference cache has no entry for pair {0:?}")]
    CacheMiss(String),
    #[error("reference cache was built from a different checkpoint")]
    CacheFingerprint,
    #[error("log-probabilities mix length-normalized and raw values")]
    MixedNormalization,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hyperparameters shared by the SFT, DPO and reward-model stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate (per optimizer step).
    pub peak_lr: f64,
    /// Examples per optimizer step.
    pub batch_size: usize,
    /// Fraction of total steps spent ramping from 0 to `peak_lr`.
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Context budget in tokens; prompts are left-truncated to fit.
    pub max_seq_len: usize,
    /// DPO KL coefficient.
    pub beta: f64,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Divide DPO sequence log-probs by completion length.
    pub length_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            batch_size: 16,
            warmup_ratio: 0.1,
            epochs: 1,
            max_seq_len: 256,
            beta: 5.0,
            seed: 0,
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
            length_normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr must be > 0, got {}", self.peak_lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return fail(format!("warmup_ratio must be in [0, 1), got {}", self.warmup_ratio));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be > 0, got {}", self.beta));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be >= 2".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip_norm < 0.0 {
            return fail("weight_decay and grad_clip_norm must be >= 0".into());
        }
        Ok(())
    }

    /// `epochs · floor(n / batch_size)`
    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.epochs * (n_examples / self.batch_size.max(1))
    }
}

/// Warmup length `round(warmup_ratio · total)`, kept below `total` so the
/// decay phase always ends at zero.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    let w = libm::round(warmup_ratio * total_steps as f64) as usize;
    w.min(total_steps.saturating_sub(1))
}

/// Linear ramp `0 → peak` over the warmup steps, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let peak = config.peak_lr;
    let total = total_steps.max(1);
    let step = step.min(total);
    let w = warmup_steps(total, config.warmup_ratio);
    // Fraction first, so the apex multiplies by exactly 1.0.
    if step < w {
        peak * (step as f64 / w as f64)
    } else {
        peak * ((total - step) as f64 / (total - w) as f64)
    }
}

/// Learning rate per example per step.
pub fn lr_bs_ratio(lr: f64, batch_size: usize) -> f64 {
    lr / batch_size as f64
}

/// Renders `ratio · 10^scale_exp` with `decimals` places, the way the
/// hyperparameter tables print the LR/BS row.
pub fn render_ratio(ratio: f64, scale_exp: i32, decimals: usize) -> String {
    let scaled = ratio * libm::pow(10.0, scale_exp as f64);
    // Strip binary noise (e.g. 937.4999999) before rounding.
    let snapped: f64 = format!("{scaled:.11e}").parse().unwrap_or(scaled);
    let factor = libm::pow(10.0, decimals as f64);
    let rounded = libm::round(snapped * factor) / factor;
    format!("{rounded:.decimals$}")
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Clips `grads` to `config.grad_clip_norm` (when positive) and applies
    /// one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f32>], lr: f64, config: &TrainConfig) -> Result<f64, TrainError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TrainError::Mismatch(format!(
                "{} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || p.numel() != self.m[i].len() {
                return Err(TrainError::Mismatch(format!("parameter {i}")));
            }
        }
        let step = self.t + 1;
        let mut sq = 0.0f64;
        for g in grads {
            for &x in g {
                if !x.is_finite() {
                    return Err(TrainError::NonFiniteGradient { step });
                }
                sq += x as f64 * x as f64;
            }
        }
        let norm = libm::sqrt(sq);
        let clip = if config.grad_clip_norm > 0.0 && norm > config.grad_clip_norm {
            config.grad_clip_norm / norm
        } else {
            1.0
        };
        self.t = step;
        let bc1 = 1.0 - libm::pow(ADAM_BETA1, step as f64);
        let bc2 = 1.0 - libm::pow(ADAM_BETA2, step as f64);
        let decay = lr * config.weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = gi as f64 * clip;
                let mn = ADAM_BETA1 * *mi as f64 + (1.0 - ADAM_BETA1) * g;
                let vn = ADAM_BETA2 * *vi as f64 + (1.0 - ADAM_BETA2) * g * g;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = (mn / bc1) / (libm::sqrt(vn / bc2) + ADAM_EPS);
                let x = *pi as f64;
                *pi = (x - lr * update - decay * x) as f32;
            }
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Optimizer steps completed, starting at 1.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Runs `config.epochs` passes of `floor(n / batch_size)` steps over
/// `params`. Batch `k` of epoch `e` comes from a permutation seeded with
/// `config.seed` and `e`; update `k` uses `lr_at(k, total)`.
///
/// `loss_fn` receives a fresh graph, the parameter handles in `params`
/// order, and the batch's example indices, and returns a scalar loss.
pub fn run_training_loop<F, O>(
    params: &mut [Tensor],
    n_examples: usize,
    config: &TrainConfig,
    mut loss_fn: F,
    mut on_step: O,
) -> Result<Vec<StepRecord>, TrainError>
where
    F: FnMut(&mut Graph<f32>, &[Var], &[usize]) -> Result<Var, TrainError>,
    O: FnMut(&StepRecord),
{
    config.validate()?;
    if n_examples == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let total = config.total_steps(n_examples);
    if total == 0 {
        return Err(DataError::EmptyPlan {
            batch_size: config.batch_size,
            n: n_examples,
        }
        .into());
    }
    let mut opt = AdamW::new(params);
    let mut records = Vec::with_capacity(total);
    let mut k = 0usize;
    for epoch in 0..config.epochs {
        let plan = BatchPlan {
            seed: epoch_seed(config.seed, epoch),
            batch_size: config.batch_size,
            drop_last: true,
        };
        for batch in make_batches(n_examples, &plan)? {
            let mut g = Graph::<f32>::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
            let loss = loss_fn(&mut g, &vars, &batch)?;
            let loss_value = g.item(loss) as f64;
            let step = k as u64 + 1;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            g.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .zip(params.iter())
                .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
                .collect();
            drop(g);
            let lr = lr_at(k, total, config);
            let grad_norm = opt.step(params, &grads, lr, config)?;
            let rec = StepRecord {
                step,
                lr,
                loss: loss_value,
                grad_norm,
            };
            on_step(&rec);
            records.push(rec);
            k += 1;
        }
    }
    Ok(records)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
