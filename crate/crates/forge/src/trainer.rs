//! Minibatch training with a fixed-order parallel gradient reduction.
//!
//! Per step: every trial of the batch is rolled out and differentiated on a
//! worker thread, per-trial gradients are summed in batch order, averaged,
//! clipped by global norm, applied with Adam, and the factor readout rows
//! are projected back to unit norm. All randomness derives from the trainer
//! seed and the (epoch, step, trial) counters, so a checkpoint only needs to
//! record counters and the output does not depend on the thread count.

use std::path::PathBuf;

use lfads_core::cells::Mode;
use lfads_core::model::{LfadsConfig, ModelParams, TrialData};
use lfads_core::objective::{kl_weight, trial_gradient, trial_loss, LossBreakdown};
use lfads_core::optim::{clip_gradients, Adam, AdamConfig};
use lfads_core::rng::stream;
use lfads_core::synth::{SpikeDataset, Split};
use lfads_core::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};

const TAG_INIT: u64 = 11;
const TAG_SHUFFLE: u64 = 12;
const TAG_NOISE: u64 = 13;
const TAG_VALID: u64 = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_grad_norm: f64,
    /// Epochs without validation improvement before the learning rate is scaled.
    pub lr_decay_patience: u32,
    pub lr_decay_factor: f64,
    pub early_stop_patience: u32,
    pub max_epochs: u64,
    /// Initialise the rate bias to the training data's mean log count.
    pub init_rate_bias: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            adam: AdamConfig::default(),
            max_grad_norm: 200.0,
            lr_decay_patience: 10,
            lr_decay_factor: 0.5,
            early_stop_patience: 30,
            max_epochs: 1000,
            init_rate_bias: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ForgeError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("trainer.batch_size must be >= 1");
        }
        if !(self.max_grad_norm > 0.0) {
            return fail("trainer.max_grad_norm must be > 0");
        }
        if !(self.adam.learning_rate >= 0.0) {
            return fail("trainer.adam.learning_rate must be >= 0");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail("trainer.lr_decay_factor must lie in (0, 1]");
        }
        if self.lr_decay_patience == 0 || self.early_stop_patience == 0 {
            return fail("trainer patience values must be >= 1");
        }
        Ok(())
    }
}

/// Counters and optimiser state; together with the parameters and configs
/// this fully determines the rest of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub epoch: u64,
    /// Batches already taken within `epoch`.
    pub batch_in_epoch: usize,
    /// Optimiser steps taken overall; also the KL schedule position.
    pub step: u64,
    pub learning_rate: f64,
    pub best_valid: Option<f64>,
    pub best_epoch: Option<u64>,
    pub stale_epochs: u32,
    pub stopped: bool,
    /// Running sum of this epoch's per-batch mean losses.
    pub epoch_loss_sum: LossBreakdown,
    pub epoch_batches: usize,
}

impl TrainState {
    fn new(lr: f64) -> Self {
        Self {
            epoch: 0,
            batch_in_epoch: 0,
            step: 0,
            learning_rate: lr,
            best_valid: None,
            best_epoch: None,
            stale_epochs: 0,
            stopped: false,
            epoch_loss_sum: LossBreakdown::default(),
            epoch_batches: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub step: u64,
    pub train: LossBreakdown,
    pub valid_total: f64,
    pub learning_rate: f64,
    pub improved: bool,
}

pub const METRICS_HEADER: &str = "epoch,step,recon_ll,kl_g0,kl_u,kl_weight,l2,total,valid_total";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let t = &self.train;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, self.step, t.recon_ll, t.kl_g0, t.kl_u, t.kl_weight, t.l2_penalty, t.total, self.valid_total
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub epoch_end: Option<EpochMetrics>,
}

pub struct Trainer<'a> {
    pub model: LfadsConfig,
    pub config: TrainerConfig,
    pub params: ModelParams,
    pub adam: Adam,
    pub state: TrainState,
    /// Most recent checkpoint written by the caller, reported on divergence.
    pub last_checkpoint: Option<PathBuf>,
    data: &'a SpikeDataset,
    counts: Vec<Tensor>,
    train_idx: Vec<usize>,
    valid_idx: Vec<usize>,
    pool: rayon::ThreadPool,
}

pub fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| ForgeError::Config(format!("cannot start worker pool: {e}")))
}

fn check_compatible(model: &LfadsConfig, config: &TrainerConfig, data: &SpikeDataset) -> Result<()> {
    model.validate()?;
    config.validate()?;
    if model.data_dim != data.neurons() || model.steps != data.steps() || model.observed_dim != 0 {
        return Err(ForgeError::Config(format!(
            "model expects {} neurons x {} bins (observed_dim {}), dataset has {} neurons x {} bins and no covariates",
            model.data_dim,
            model.steps,
            model.observed_dim,
            data.neurons(),
            data.steps()
        )));
    }
    Ok(())
}

/// Fresh parameters for `model` under trainer seed `seed`.
pub fn init_params(model: &LfadsConfig, config: &TrainerConfig, data: &SpikeDataset) -> Result<ModelParams> {
    let mut params = ModelParams::init(model, &mut stream(config.seed, &[TAG_INIT]))?;
    if config.init_rate_bias {
        let bias = data.mean_log_count(Split::Train);
        params.rates.bias.data_mut().copy_from_slice(&bias);
    }
    Ok(params)
}

impl<'a> Trainer<'a> {
    pub fn new(model: LfadsConfig, config: TrainerConfig, data: &'a SpikeDataset, threads: usize) -> Result<Self> {
        check_compatible(&model, &config, data)?;
        let params = init_params(&model, &config, data)?;
        let adam = Adam::new(params.num_params());
        let state = TrainState::new(config.adam.learning_rate);
        Self::resume(model, config, params, adam, state, data, threads)
    }

    pub fn resume(
        model: LfadsConfig,
        config: TrainerConfig,
        params: ModelParams,
        adam: Adam,
        state: TrainState,
        data: &'a SpikeDataset,
        threads: usize,
    ) -> Result<Self> {
        check_compatible(&model, &config, data)?;
        let mut state = state;
        state.stopped = state.stale_epochs >= config.early_stop_patience || state.epoch >= config.max_epochs;
        if adam.m.len() != params.num_params() {
            return Err(ForgeError::Config("optimiser state does not match parameters".into()));
        }
        let train_idx = data.indices(Split::Train);
        if train_idx.is_empty() {
            return Err(ForgeError::Config("dataset has no training trials".into()));
        }
        let valid_idx = data.indices(Split::Valid);
        let counts = (0..data.n_trials()).map(|i| data.trial_counts(i)).collect();
        Ok(Self {
            model,
            config,
            params,
            adam,
            state,
            last_checkpoint: None,
            data,
            counts,
            train_idx,
            valid_idx,
            pool: build_pool(threads)?,
        })
    }

    pub fn dataset(&self) -> &SpikeDataset {
        self.data
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train_idx.len().div_ceil(self.config.batch_size)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.train_idx.clone();
        order.shuffle(&mut stream(self.config.seed, &[TAG_SHUFFLE, epoch]));
        order
    }

    fn diverged(&self, cause: impl std::fmt::Display) -> ForgeError {
        ForgeError::Diverged {
            step: self.state.step,
            cause: cause.to_string(),
            last_good: self.last_checkpoint.clone(),
        }
    }

    /// One optimiser step on the next batch of the current epoch; finishes the
    /// epoch (validation, schedule bookkeeping) after its last batch.
    pub fn train_step(&mut self) -> Result<StepOutcome> {
        let order = self.epoch_order(self.state.epoch);
        let bs = self.config.batch_size;
        let start = self.state.batch_in_epoch * bs;
        let batch = &order[start..(start + bs).min(order.len())];
        let kl_w = kl_weight(self.state.step, &self.model.kl);
        let step = self.state.step;
        let (seed, model, params, counts) = (self.config.seed, &self.model, &self.params, &self.counts);
        let results: Vec<lfads_core::Result<(LossBreakdown, ModelParams)>> = self.pool.install(|| {
            batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream(seed, &[TAG_NOISE, step, i as u64]);
                    trial_gradient(model, params, &TrialData::new(&counts[i]), kl_w, &mut rng, Mode::Train)
                })
                .collect()
        });
        let mut losses = Vec::with_capacity(batch.len());
        let mut grad = self.params.zeros_like();
        for r in results {
            let (loss, g) = r.map_err(|e| self.diverged(e))?;
            grad.axpy(1.0, &g);
            losses.push(loss);
        }
        grad.scale(1.0 / batch.len() as f64);
        let loss = LossBreakdown::mean(&losses);
        if !loss.total.is_finite() || !grad.is_finite() {
            return Err(self.diverged("non-finite loss or gradient"));
        }
        let grad_norm = clip_gradients(&mut grad, self.config.max_grad_norm);
        let mut next = self.params.clone();
        self.adam.step(&mut next, &grad, self.state.learning_rate, &self.config.adam)?;
        next.normalize_factor_rows();
        if !next.is_finite() {
            return Err(self.diverged("non-finite parameters after update"));
        }
        self.params = next;
        self.state.step += 1;
        self.state.batch_in_epoch += 1;
        accumulate(&mut self.state.epoch_loss_sum, &loss);
        self.state.epoch_batches += 1;
        let epoch_end = if self.state.batch_in_epoch == self.batches_per_epoch() {
            Some(self.finish_epoch()?)
        } else {
            None
        };
        Ok(StepOutcome {
            loss,
            grad_norm,
            epoch_end,
        })
    }

    /// Runs the remaining batches of the current epoch.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        loop {
            if let Some(m) = self.train_step()?.epoch_end {
                return Ok(m);
            }
        }
    }

    /// Mean validation loss, dropout off and KL weight 1. Falls back to the
    /// training split when there are no validation trials.
    pub fn validation_loss(&self) -> Result<f64> {
        let idx = if self.valid_idx.is_empty() { &self.train_idx } else { &self.valid_idx };
        let (seed, model, params, counts) = (self.config.seed, &self.model, &self.params, &self.counts);
        let losses: Vec<lfads_core::Result<LossBreakdown>> = self.pool.install(|| {
            idx.par_iter()
                .map(|&i| {
                    let mut rng = stream(seed, &[TAG_VALID, i as u64]);
                    trial_loss(model, params, &TrialData::new(&counts[i]), 1.0, &mut rng, Mode::Eval)
                })
                .collect()
        });
        let mut total = 0.0;
        for l in losses {
            total += l.map_err(|e| self.diverged(e))?.total;
        }
        Ok(total / idx.len() as f64)
    }

    fn finish_epoch(&mut self) -> Result<EpochMetrics> {
        let valid = self.validation_loss()?;
        let n = self.state.epoch_batches.max(1) as f64;
        let s = &self.state.epoch_loss_sum;
        let train = LossBreakdown {
            recon_ll: s.recon_ll / n,
            kl_g0: s.kl_g0 / n,
            kl_u: s.kl_u / n,
            kl_weight: s.kl_weight / n,
            l2_penalty: s.l2_penalty / n,
            total: s.total / n,
        };
        let improved = self.state.best_valid.is_none_or(|b| valid < b);
        if improved {
            self.state.best_valid = Some(valid);
            self.state.best_epoch = Some(self.state.epoch);
            self.state.stale_epochs = 0;
        } else {
            self.state.stale_epochs += 1;
            if self.state.stale_epochs.is_multiple_of(self.config.lr_decay_patience) {
                self.state.learning_rate *= self.config.lr_decay_factor;
            }
            if self.state.stale_epochs >= self.config.early_stop_patience {
                self.state.stopped = true;
            }
        }
        let metrics = EpochMetrics {
            epoch: self.state.epoch,
            step: self.state.step,
            train,
            valid_total: valid,
            learning_rate: self.state.learning_rate,
            improved,
        };
        self.state.epoch += 1;
        self.state.batch_in_epoch = 0;
        self.state.epoch_loss_sum = LossBreakdown::default();
        self.state.epoch_batches = 0;
        if self.state.epoch >= self.config.max_epochs {
            self.state.stopped = true;
        }
        Ok(metrics)
    }
}

fn accumulate(sum: &mut LossBreakdown, x: &LossBreakdown) {
    sum.recon_ll += x.recon_ll;
    sum.kl_g0 += x.kl_g0;
    sum.kl_u += x.kl_u;
    sum.kl_weight += x.kl_weight;
    sum.l2_penalty += x.l2_penalty;
    sum.total += x.total;
}

impl Trainer<'_> {
    /// Everything needed to continue this run bit-identically.
    pub fn snapshot(&self) -> crate::checkpoint::Checkpoint {
        crate::checkpoint::Checkpoint {
            model: self.model.clone(),
            trainer: self.config.clone(),
            state: self.state.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }
}
