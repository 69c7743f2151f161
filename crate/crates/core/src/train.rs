//! Minibatch pretraining loop with AdamW and a one-cycle schedule.
//!
//! Parameters and optimizer moments are rounded to `f32` at the end of
//! every epoch. Checkpoints store `f32`, so resuming from one continues
//! with exactly the state the uninterrupted run had.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, OneCycle};
use crate::models::ModelBundle;
use crate::objectives::{evaluate_loss, loss_and_grads, LossBreakdown, LossWeights, ObjectiveError, PairBatch};
use crate::odesolve::{GradientMode, SolverConfig, SolverStats};
use crate::synthdata::{Cohort, PairRef};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub solver: SolverConfig,
    pub grad_mode: GradientMode,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 5e-4,
            weight_decay: 1e-5,
            batch_size: 32,
            weights: LossWeights { recon: 1.0, dir: 1.0 },
            solver: SolverConfig::default(),
            grad_mode: GradientMode::Adjoint,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// Forward solver statistics summed over the epoch's training steps.
    pub solver: SolverStats,
}

/// Shuffled minibatches of `0..n` for one epoch; depends only on
/// `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | epoch as u64);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn n_batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Mean loss over `pairs`, evaluated in chunks without gradients.
pub fn mean_loss(
    bundle: &ModelBundle,
    cohort: &Cohort,
    pairs: &[PairRef],
    w: &LossWeights,
    solver: &SolverConfig,
    chunk: usize,
) -> Result<LossBreakdown, ObjectiveError> {
    let mut parts = Vec::new();
    for c in pairs.chunks(chunk.max(1)) {
        let batch = PairBatch::from_pairs(cohort, c)?;
        parts.push(evaluate_loss(bundle, &batch, w, solver)?.0);
    }
    Ok(LossBreakdown::mean(&parts))
}

pub struct Trainer {
    pub bundle: ModelBundle,
    pub opt: AdamW,
    pub cfg: PretrainConfig,
    pub schedule: OneCycle,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, cfg: PretrainConfig, n_train: usize) -> Self {
        let opt = AdamW::new(&bundle.param_sizes(), cfg.weight_decay);
        Self::resume(bundle, opt, 0, cfg, n_train)
    }

    pub fn resume(bundle: ModelBundle, opt: AdamW, epoch: usize, cfg: PretrainConfig, n_train: usize) -> Self {
        let total = (cfg.epochs * n_batches(n_train, cfg.batch_size)).max(1);
        let schedule = OneCycle::new(cfg.lr, total);
        Self { bundle, opt, cfg, schedule, epoch }
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// One pass over `train` followed by a validation pass over `val`.
    pub fn run_epoch(&mut self, cohort: &Cohort, train: &[PairRef], val: &[PairRef]) -> Result<EpochRecord, ObjectiveError> {
        let mut parts = Vec::new();
        let mut stats = SolverStats::default();
        let mut lr = 0.0;
        for idx in epoch_batches(train.len(), self.cfg.batch_size, self.cfg.seed, self.epoch) {
            let refs: Vec<PairRef> = idx.iter().map(|&i| train[i]).collect();
            let batch = PairBatch::from_pairs(cohort, &refs)?;
            let (loss, grads, st) = loss_and_grads(&self.bundle, &batch, &self.cfg.weights, &self.cfg.solver, self.cfg.grad_mode)?;
            lr = self.schedule.lr(self.opt.step_count() as usize);
            self.opt.step(self.bundle.params_mut(), &grads, lr)?;
            stats.merge(&st);
            parts.push(loss);
        }
        self.bundle.round_to_f32();
        self.opt.round_to_f32();
        self.epoch += 1;
        let val = if val.is_empty() { LossBreakdown::default() } else { mean_loss(&self.bundle, cohort, val, &self.cfg.weights, &self.cfg.solver, 256)? };
        Ok(EpochRecord { epoch: self.epoch, lr, train: LossBreakdown::mean(&parts), val, solver: stats })
    }
}
