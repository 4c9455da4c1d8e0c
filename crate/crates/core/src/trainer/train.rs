// SPDX-License-Identifier: MIT OR Apache-2.0

use super::checkpoint::{Checkpoint, ValPoint};
use super::grad::{loss_and_grads_counted, mean_loss};
use super::optim::{adamw_step, clip_gradients, lr_at_step, AdamWState, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{seeded_permutation, Scalar};
use crate::transformer::Parameters;

const EPOCH_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Draws corpus indices epoch by epoch, each epoch a fresh seeded
/// permutation. Batches may straddle an epoch boundary.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    seed: u64,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(seed: u64, n: usize) -> Result<Self> {
        let order = seeded_permutation(seed, n)?;
        Ok(Self {
            seed,
            n,
            epoch: 0,
            order,
            cursor: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_index(&mut self) -> usize {
        if self.cursor == self.n {
            self.epoch += 1;
            let seed = self.seed ^ self.epoch.wrapping_mul(EPOCH_MIX);
            self.order = seeded_permutation(seed, self.n).expect("n > 0");
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.next_index()).collect()
    }
}

/// Gradient of the mean loss over the union of `shards`.
///
/// Each shard is differentiated on its own and the results are summed in
/// shard order, weighted by each shard's share of predicted positions.
pub fn accumulated_gradients<T: Scalar>(
    params: &Parameters<T>,
    shards: &[Vec<Vec<usize>>],
) -> Result<(f64, Parameters<T>)> {
    if shards.is_empty() {
        return Err(Error::InvalidArgument("no gradient shards".into()));
    }
    let parts = shards
        .iter()
        .map(|s| loss_and_grads_counted(params, s))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = parts.iter().map(|p| p.2).sum();
    let mut grads = Parameters::zeros(&params.config);
    let mut loss = 0.0;
    for (l, g, count) in &parts {
        let w = *count as f64 / total as f64;
        grads.add_scaled(g, T::of(w));
        loss += w * l;
    }
    Ok((loss, grads))
}

/// Progress notifications from [`train`].
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step {
        step: usize,
        lr: f64,
        loss: f64,
        grad_norm: f64,
    },
    Validation(ValPoint),
    /// Emitted at every validation point and after the final step.
    Checkpoint(&'a Checkpoint),
}

/// Trains `start` on `corpus` for `config.total_steps` steps.
///
/// `start.step` must be 0; resuming mid-schedule is not supported.
/// Validation loss on `validation` is recorded at step 0, every
/// `config.eval_every` steps and at the end.
pub fn train<F>(
    start: Checkpoint,
    corpus: &[Vec<usize>],
    validation: &[Vec<usize>],
    config: &TrainConfig,
    mut on_event: F,
) -> Result<Checkpoint>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    config.validate()?;
    let per_step = config.sequences_per_step();
    if corpus.len() < per_step {
        return Err(Error::InvalidArgument(format!(
            "corpus of {} sequences is shorter than one batch of {per_step}",
            corpus.len()
        )));
    }
    if start.step != 0 {
        return Err(Error::InvalidArgument("training must start from step 0".into()));
    }
    let mut ck = start;
    ck.train_config = Some(config.clone());
    if ck.optimizer.m.config != ck.params.config {
        ck.optimizer = AdamWState::new(&ck.params);
    }
    let mut sampler = EpochSampler::new(config.seed, corpus.len())?;

    let validate = |ck: &mut Checkpoint, on_event: &mut F| -> Result<()> {
        if validation.is_empty() {
            return Ok(());
        }
        let point = ValPoint {
            step: ck.step,
            loss: mean_loss(&ck.params, validation)?,
        };
        ck.val_history.push(point);
        on_event(TrainEvent::Validation(point))
    };
    validate(&mut ck, &mut on_event)?;

    for step in 0..config.total_steps {
        let lr = lr_at_step(config, step)?;
        let shards: Vec<Vec<Vec<usize>>> = (0..config.grad_accum_shards)
            .map(|_| {
                sampler
                    .take(config.batch_size)
                    .into_iter()
                    .map(|i| corpus[i].clone())
                    .collect()
            })
            .collect();
        let (loss, mut grads) = accumulated_gradients(&ck.params, &shards)?;
        let grad_norm = clip_gradients(&mut grads, config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        adamw_step(&mut ck.params, &grads, &mut ck.optimizer, config, lr)?;
        if !ck.params.is_finite() {
            return Err(Error::NonFinite("parameter update"));
        }
        ck.step = step + 1;
        on_event(TrainEvent::Step {
            step: ck.step,
            lr,
            loss,
            grad_norm,
        })?;
        let last = ck.step == config.total_steps;
        let cadence = config.eval_every > 0 && ck.step.is_multiple_of(config.eval_every);
        if cadence || last {
            validate(&mut ck, &mut on_event)?;
            on_event(TrainEvent::Checkpoint(&ck))?;
        }
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_epoch_covers_the_corpus_once() {
        let n = 37;
        let mut s = EpochSampler::new(9, n).unwrap();
        let mut prev = Vec::new();
        for epoch in 0..4 {
            let mut seen = s.take(n);
            assert_eq!(s.epoch(), epoch);
            let order = seen.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert_ne!(order, prev);
            prev = order;
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let a = EpochSampler::new(3, 10).unwrap().take(45);
        let b = EpochSampler::new(3, 10).unwrap().take(45);
        assert_eq!(a, b);
        assert!(EpochSampler::new(3, 0).is_err());
    }
}
