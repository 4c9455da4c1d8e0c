// SPDX-License-Identifier: MIT OR Apache-2.0

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::transformer::{ParamKind, Parameters};

/// Optimizer, schedule and batching settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    /// `lr_min = lr_min_ratio * lr_max`.
    pub lr_min_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    /// Sequences per shard; one step consumes `batch_size * grad_accum_shards`.
    pub batch_size: usize,
    pub grad_accum_shards: usize,
    pub seed: u64,
    /// Validation cadence in steps; 0 records only the start and the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 6e-4,
            lr_min_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            warmup_fraction: 0.1,
            total_steps: 1000,
            batch_size: 8,
            grad_accum_shards: 1,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if !(self.lr_max > 0.0) || !(0.0..=1.0).contains(&self.lr_min_ratio) {
            return bad("need lr_max > 0 and lr_min_ratio in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("need eps > 0 and weight_decay >= 0");
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.grad_accum_shards == 0 {
            return bad("total_steps, batch_size and grad_accum_shards must be positive");
        }
        Ok(())
    }

    pub fn lr_min(&self) -> f64 {
        self.lr_min_ratio * self.lr_max
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).ceil() as usize).max(1)
    }

    pub fn sequences_per_step(&self) -> usize {
        self.batch_size * self.grad_accum_shards
    }
}

/// Learning rate for `step`: linear warmup, then cosine decay to `lr_min`.
pub fn lr_at_step(config: &TrainConfig, step: usize) -> Result<f64> {
    if step > config.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {}",
            config.total_steps
        )));
    }
    let warm = config.warmup_steps();
    if step < warm {
        return Ok(config.lr_max * (step + 1) as f64 / warm as f64);
    }
    let span = config.total_steps.saturating_sub(warm);
    let progress = if span == 0 {
        1.0
    } else {
        (step - warm) as f64 / span as f64
    };
    let (hi, lo) = (config.lr_max, config.lr_min());
    Ok(lo + 0.5 * (hi - lo) * (1.0 + (PI * progress).cos()))
}

/// Rescales `grads` so its global L2 norm is at most `clip_norm`. Returns
/// the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut Parameters<T>, clip_norm: f64) -> f64 {
    let g = grads.global_norm();
    if g > clip_norm {
        grads.scale_in_place(T::of(clip_norm / g));
    }
    g
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T = f32> {
    pub step: usize,
    pub m: Parameters<T>,
    pub v: Parameters<T>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        Self {
            step: 0,
            m: Parameters::zeros(&params.config),
            v: Parameters::zeros(&params.config),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AdamWState<U> {
        AdamWState {
            step: self.step,
            m: self.m.cast(),
            v: self.v.cast(),
        }
    }
}

/// One AdamW update at learning rate `lr`.
pub fn adamw_step<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    state: &mut AdamWState<T>,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if params.config != grads.config || params.config != state.m.config {
        return Err(Error::InvalidArgument(
            "parameters, gradients and optimizer state disagree on the model config".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = T::of(1.0 - lr * config.weight_decay);
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (nb1, nb2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let step_size = T::of(lr / c1);
    let inv_sqrt_c2 = T::of(1.0 / c2.sqrt());
    let eps = T::of(config.eps);

    let grads = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (i, (_, kind, p)) in params.tensors_mut().into_iter().enumerate() {
        let g = grads[i].2.data();
        let m = ms[i].2.data_mut();
        let v = vs[i].2.data_mut();
        let decayed = kind == ParamKind::Matrix;
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1t * m[j] + nb1 * g[j];
            v[j] = b2t * v[j] + nb2 * g[j] * g[j];
            if decayed {
                *x *= decay;
            }
            *x -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}
