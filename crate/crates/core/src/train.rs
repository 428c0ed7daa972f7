//! Shared optimisation loop with per-step derived randomness, so a resumed
//! run replays exactly the batches and noise of an uninterrupted one.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::numerics::{adam_step, clip_global_norm, derive_seed, AdamConfig, AdamState, Bound, Graph, ParamStore, Rng, Var};

const DATA_STREAM: u64 = 0xDA7A;
const NOISE_STREAM: u64 = 0x401_5E;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub lr_schedule: LrSchedule,
    /// Linear warm-up length in steps.
    pub warmup: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero at `steps`.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 250,
            lr_schedule: LrSchedule::Constant,
            warmup: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup { (step + 1) as f64 / self.warmup as f64 } else { 1.0 };
        let decay = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let u = step as f64 / self.steps.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * u).cos())
            }
        };
        self.lr * warm * decay
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(config_err!("learning rate must be positive"));
        }
        Ok(())
    }

    /// Clip indices of the batch used at `step`.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let mut rng = Rng::new(derive_seed(self.seed, DATA_STREAM)).derive(step as u64);
        (0..self.batch_size).map(|_| rng.below(n)).collect()
    }

    pub fn step_rng(&self, step: usize) -> Rng {
        Rng::new(derive_seed(self.seed, NOISE_STREAM)).derive(step as u64)
    }

    /// Hash of every batch the run will draw; equal hashes mean equal data order.
    pub fn data_order_hash(&self, n: usize) -> String {
        let mut h = Sha256::new();
        for s in 0..self.steps {
            for i in self.batch_indices(s, n) {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Optimiser progress for a group of jointly trained parameter stores.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub adam: Vec<AdamState>,
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(stores: &[&ParamStore]) -> Self {
        Self {
            step: 0,
            adam: stores.iter().map(|s| AdamState::new(s)).collect(),
            losses: Vec::new(),
        }
    }
}

/// One step's context handed to the loss builder.
pub struct StepCtx<'a> {
    pub step: usize,
    pub batch: &'a [usize],
    pub rng: &'a mut Rng,
}

/// Run until `cfg.steps`. `loss_fn` builds the scalar loss on a fresh graph
/// from bound trainable stores; `on_step` fires after every update with the
/// completed step count.
pub fn run<L, C>(
    stores: &mut [&mut ParamStore],
    cfg: &TrainConfig,
    n_items: usize,
    state: &mut TrainState,
    mut loss_fn: L,
    mut on_step: C,
) -> Result<()>
where
    L: FnMut(&mut Graph, &[Bound], &mut StepCtx) -> Result<Var>,
    C: FnMut(&[&mut ParamStore], &TrainState) -> Result<()>,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(config_err!("training set is empty"));
    }
    if let Some(s) = stores.iter().find(|s| s.is_frozen()) {
        return Err(Error::Internal(format!("attempt to train a frozen store ({} tensors)", s.len())));
    }
    while state.step < cfg.steps {
        let step = state.step;
        let hyper = AdamConfig {
            lr: cfg.lr_at(step),
            ..cfg.adam()
        };
        let batch = cfg.batch_indices(step, n_items);
        let mut rng = cfg.step_rng(step);
        let mut g = Graph::new();
        let bound: Vec<Bound> = stores.iter().map(|s| g.bind(s, true)).collect();
        let loss = loss_fn(
            &mut g,
            &bound,
            &mut StepCtx {
                step,
                batch: &batch,
                rng: &mut rng,
            },
        )?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::TrainingAbort {
                step,
                reason: format!("loss is {value}"),
            });
        }
        g.backward(loss)?;
        let mut grads: Vec<Vec<_>> = bound.iter().map(|b| g.grads(b)).collect();
        if cfg.clip_norm > 0.0 {
            let mut refs: Vec<&mut [_]> = grads.iter_mut().map(|v| v.as_mut_slice()).collect();
            clip_global_norm(&mut refs, cfg.clip_norm);
        }
        for ((store, gr), adam) in stores.iter_mut().zip(&grads).zip(state.adam.iter_mut()) {
            adam_step(store, gr, adam, &hyper).map_err(|e| match e {
                Error::NonFiniteGradient { param } => Error::TrainingAbort {
                    step,
                    reason: format!("non-finite gradient for parameter `{param}`"),
                },
                other => other,
            })?;
        }
        state.losses.push(value);
        state.step += 1;
        on_step(stores, state)?;
    }
    Ok(())
}
