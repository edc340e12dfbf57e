//! Optimization loop: Adadelta, epoch scheduling, early stopping, and
//! 3-fold hyperparameter search.
//!
//! All randomness is ChaCha8 keyed on the configured seed. Parameter
//! initialization owns stream 0; each epoch draws its shuffle and its
//! negative samples from two dedicated streams, so a run resumed from a
//! checkpoint at an epoch boundary replays the exact same batches.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EncodedReview;
use crate::evaluation::{prf1, score_reviews, EvalError};
use crate::model::{
    classification_loss, forward, overall_loss, sample_negatives, transh_loss, HyperParams,
    LossTerms, ModelError, ModelParams, VocabSizes,
};
use crate::tensor::{DenseTensor, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {reason}")]
    BadConfig { reason: String },
    #[error("non-finite gradient for parameter {name:?}")]
    NonFiniteGradient { name: String },
    #[error("no optimizer state for parameter {name:?}")]
    UnknownParam { name: String },
    #[error("optimizer state for {name:?} does not match the parameter shape")]
    StaleState { name: String },
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("not a checkpoint file: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found}")]
    IncompatibleVersion { found: u32 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint is corrupt: {reason}")]
    Corrupt { reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Per-coordinate running averages for Adadelta, one pair of tensors per
/// parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    eg2: BTreeMap<String, DenseTensor>,
    edx2: BTreeMap<String, DenseTensor>,
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdadeltaState {
    pub fn new(params: &ModelParams, rho: f64, eps: f64, lr: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(TrainError::BadConfig {
                reason: format!("rho must lie in (0, 1), got {rho}"),
            });
        }
        if !(eps > 0.0) || !(lr > 0.0) {
            return Err(TrainError::BadConfig {
                reason: format!("eps and lr must be positive, got eps={eps} lr={lr}"),
            });
        }
        let zeros = |t: &DenseTensor| {
            DenseTensor::new(t.shape().to_vec(), vec![0.0; t.numel()]).expect("valid shape")
        };
        let eg2 = params.tensors().map(|(n, t)| (n.to_string(), zeros(t))).collect();
        let edx2 = params.tensors().map(|(n, t)| (n.to_string(), zeros(t))).collect();
        Ok(AdadeltaState { eg2, edx2, rho, eps, lr })
    }

    /// Rebuilds state from stored tensors (checkpoint loading).
    pub fn from_parts(
        eg2: BTreeMap<String, DenseTensor>,
        edx2: BTreeMap<String, DenseTensor>,
        rho: f64,
        eps: f64,
        lr: f64,
    ) -> Self {
        AdadeltaState { eg2, edx2, rho, eps, lr }
    }

    pub fn eg2(&self) -> &BTreeMap<String, DenseTensor> {
        &self.eg2
    }

    pub fn edx2(&self) -> &BTreeMap<String, DenseTensor> {
        &self.edx2
    }
}

/// Applies one Adadelta update to every parameter named in `grads`.
/// Parameters absent from the gradient map are left untouched, which is
/// how frozen tensors are skipped. The relation hyperplane is re-scaled
/// to unit length afterwards.
pub fn adadelta_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, DenseTensor>,
    state: &mut AdadeltaState,
) -> Result<()> {
    for (name, grad) in grads {
        if !grad.is_finite() {
            return Err(TrainError::NonFiniteGradient { name: name.clone() });
        }
    }
    let (rho, eps, lr) = (state.rho, state.eps, state.lr);
    for (name, grad) in grads {
        let eg2 = state
            .eg2
            .get_mut(name)
            .ok_or_else(|| TrainError::UnknownParam { name: name.clone() })?;
        let edx2 = state
            .edx2
            .get_mut(name)
            .ok_or_else(|| TrainError::UnknownParam { name: name.clone() })?;
        let tensor = params.get_mut(name)?;
        if eg2.shape() != grad.shape() || tensor.shape() != grad.shape() {
            return Err(TrainError::StaleState { name: name.clone() });
        }
        let g = grad.data();
        let eg2 = eg2.data_mut();
        let edx2 = edx2.data_mut();
        let x = tensor.data_mut();
        for i in 0..g.len() {
            eg2[i] = rho * eg2[i] + (1.0 - rho) * g[i] * g[i];
            let delta = -lr * ((edx2[i] + eps).sqrt() / (eg2[i] + eps).sqrt()) * g[i];
            edx2[i] = rho * edx2[i] + (1.0 - rho) * delta * delta;
            x[i] += delta;
        }
    }
    if let Ok(w) = params.get_mut("transh_wd") {
        let norm = w.l2_norm();
        if norm > 0.0 {
            w.data_mut().iter_mut().for_each(|x| *x /= norm);
        } else {
            // Degenerate but keeps the unit invariant.
            w.data_mut()[0] = 1.0;
        }
    }
    Ok(())
}

/// Multiplicative schedule: the step size for `epoch` is
/// `base_lr * factor^epoch`.
pub fn decay_lr(state: &mut AdadeltaState, base_lr: f64, factor: f64, epoch: usize) {
    state.lr = base_lr * factor.powi(epoch as i32);
}

/// Everything the loop needs besides the model hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub n_neg: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub rho: f64,
    pub eps: f64,
    /// Epochs without a validation F1 improvement before stopping.
    pub patience: usize,
    pub freeze_word_emb: bool,
    /// Zero both entity tables at init and keep them frozen.
    pub zero_entity: bool,
    pub grid_r: Vec<usize>,
    pub grid_beta: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            seed: 42,
            n_neg: 2,
            lr: 1.0,
            lr_decay: 0.95,
            rho: 0.95,
            eps: 1e-6,
            patience: 5,
            freeze_word_emb: false,
            zero_entity: false,
            grid_r: (1..=10).collect(),
            grid_beta: vec![0.01, 0.1, 1.0, 10.0, 100.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(TrainError::BadConfig { reason });
        if self.batch_size < 2 {
            return fail(format!(
                "batch_size must be at least 2 so negatives can be sampled in-batch, got {}",
                self.batch_size
            ));
        }
        if self.n_neg < 1 {
            return fail("n_neg must be at least 1".to_string());
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return fail(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".to_string());
        }
        Ok(())
    }

    /// Names of tensors excluded from updates under this config.
    fn frozen(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.freeze_word_emb {
            out.push("word_emb");
        }
        if self.zero_entity {
            out.push("user_emb");
            out.push("prod_emb");
        }
        out
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shuffled index batches for one epoch. The permutation is a pure
/// function of `(seed, epoch)`; a short final batch is kept.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, 1 + 2 * epoch as u64));
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Mean losses over one epoch, each averaged per review.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub ce: f64,
    pub relation: f64,
    pub total: f64,
}

/// One pass over the training split: shuffle, forward, losses, backward,
/// Adadelta. Returns the epoch's mean losses.
pub fn train_epoch(
    params: &mut ModelParams,
    state: &mut AdadeltaState,
    train: &[EncodedReview],
    hp: &HyperParams,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    if train.is_empty() {
        return Err(TrainError::BadConfig {
            reason: "training split is empty".to_string(),
        });
    }
    let batches = make_batches(train.len(), config.batch_size, config.seed, epoch);
    let mut sampler = stream_rng(config.seed, 2 + 2 * epoch as u64);
    let frozen = config.frozen();

    let mut ce_sum = 0.0;
    let mut rel_sum = 0.0;
    let mut rel_count = 0usize;
    for batch in &batches {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let mut traces = Vec::with_capacity(batch.len());
        for &i in batch {
            traces.push(forward(&mut tape, &bound, &train[i], hp)?);
        }
        let negatives = if hp.beta > 0.0 {
            sample_negatives(&traces, config.n_neg, &mut sampler)
        } else {
            vec![Vec::new(); traces.len()]
        };
        let mut terms = Vec::with_capacity(traces.len());
        for (trace, negs) in traces.iter().zip(&negatives) {
            let ce = classification_loss(&mut tape, trace.logits, trace.label)?;
            ce_sum += tape.value(ce).item()?;
            let relation = if negs.is_empty() {
                None
            } else {
                let id = transh_loss(&mut tape, &bound, &trace.positive_triplet(), negs)?;
                rel_sum += tape.value(id).item()?;
                rel_count += 1;
                Some(id)
            };
            terms.push(LossTerms { ce, relation });
        }
        let loss = overall_loss(&mut tape, &terms, hp.beta)?;
        let mut grads = tape.backward(loss)?.into_named(&tape);
        for name in &frozen {
            grads.remove(*name);
        }
        adadelta_step(params, &grads, state)?;
    }
    let n = train.len() as f64;
    Ok(EpochMetrics {
        ce: ce_sum / n,
        relation: if rel_count == 0 { 0.0 } else { rel_sum / rel_count as f64 },
        total: (ce_sum + hp.beta * rel_sum) / n,
    })
}

/// What the loop reports after each epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub relation: f64,
    pub total: f64,
    pub val_f1: Option<f64>,
    pub lr: f64,
}

/// Mutable training state that survives checkpointing: parameters,
/// optimizer accumulators, and the early-stopping bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainSession {
    pub params: ModelParams,
    pub state: AdadeltaState,
    /// Next epoch to run; doubles as the count of completed epochs.
    pub next_epoch: usize,
    pub best_f1: f64,
    pub stale: usize,
}

impl TrainSession {
    /// Initializes parameters and optimizer state from the seed.
    pub fn fresh(hp: &HyperParams, sizes: VocabSizes, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ModelParams::init(hp, sizes, config.seed)?;
        if config.zero_entity {
            params.zero_entities();
        }
        let state = AdadeltaState::new(&params, config.rho, config.eps, config.lr)?;
        Ok(TrainSession {
            params,
            state,
            next_epoch: 0,
            best_f1: f64::NEG_INFINITY,
            stale: 0,
        })
    }

    /// Runs epochs until the configured cap, or earlier when validation
    /// F1 has not improved for `patience` epochs. With an empty
    /// validation split early stopping is disabled. `on_epoch` fires
    /// after every completed epoch.
    pub fn run<F>(
        &mut self,
        train: &[EncodedReview],
        valid: &[EncodedReview],
        hp: &HyperParams,
        config: &TrainConfig,
        mut on_epoch: F,
    ) -> Result<()>
    where
        F: FnMut(&EpochRecord),
    {
        config.validate()?;
        while self.next_epoch < config.epochs {
            let epoch = self.next_epoch;
            decay_lr(&mut self.state, config.lr, config.lr_decay, epoch);
            let metrics = train_epoch(&mut self.params, &mut self.state, train, hp, config, epoch)?;
            let val_f1 = if valid.is_empty() {
                None
            } else {
                let scored = score_reviews(&self.params, hp, valid)?;
                Some(prf1(&scored, 0.5)?.f1)
            };
            self.next_epoch += 1;
            if let Some(f1) = val_f1 {
                if f1 > self.best_f1 {
                    self.best_f1 = f1;
                    self.stale = 0;
                } else {
                    self.stale += 1;
                }
            }
            on_epoch(&EpochRecord {
                epoch,
                ce: metrics.ce,
                relation: metrics.relation,
                total: metrics.total,
                val_f1,
                lr: self.state.lr,
            });
            if val_f1.is_some() && self.stale >= config.patience {
                break;
            }
        }
        Ok(())
    }
}

/// One cell of the cross-validation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub r: usize,
    pub beta: f64,
    pub fold: usize,
    pub f1: f64,
}

/// Grid search outcome: the winning pair plus every fold score.
#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub best_r: usize,
    pub best_beta: f64,
    pub table: Vec<FoldResult>,
}

/// 3-fold cross-validation over the `(r, beta)` grid. Folds are a
/// seeded shuffle split round-robin; each cell trains on two folds and
/// scores the held-out one by its best validation F1. Ties prefer the
/// smaller `r`, then the smaller `beta`.
pub fn cross_validate(
    reviews: &[EncodedReview],
    hp_base: &HyperParams,
    sizes: VocabSizes,
    config: &TrainConfig,
) -> Result<CvOutcome> {
    const FOLDS: usize = 3;
    config.validate()?;
    if config.grid_r.is_empty() || config.grid_beta.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    if reviews.len() < 3 * FOLDS {
        return Err(TrainError::BadConfig {
            reason: format!(
                "cross-validation needs at least {} reviews for {FOLDS} folds, got {}",
                3 * FOLDS,
                reviews.len()
            ),
        });
    }
    let mut grid_r = config.grid_r.clone();
    grid_r.sort_unstable();
    grid_r.dedup();
    let mut grid_beta = config.grid_beta.clone();
    if grid_beta.iter().any(|b| !(*b >= 0.0)) {
        return Err(TrainError::BadConfig {
            reason: "grid betas must be finite and non-negative".to_string(),
        });
    }
    grid_beta.sort_by(|a, b| a.partial_cmp(b).expect("finite betas"));
    grid_beta.dedup();

    let mut idx: Vec<usize> = (0..reviews.len()).collect();
    // Fold assignment gets its own stream, far from the epoch streams.
    idx.shuffle(&mut stream_rng(config.seed, u64::MAX));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; reviews.len()];
        for (pos, &i) in idx.iter().enumerate() {
            f[i] = pos % FOLDS;
        }
        f
    };

    let mut table = Vec::new();
    let mut best: Option<(usize, f64, f64)> = None;
    for &r in &grid_r {
        for &beta in &grid_beta {
            let hp = HyperParams::new(hp_base.d, hp_base.m, r, beta, hp_base.l, hp_base.t)?;
            let mut mean = 0.0;
            for fold in 0..FOLDS {
                let train: Vec<EncodedReview> = reviews
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| fold_of[*i] != fold)
                    .map(|(_, x)| x.clone())
                    .collect();
                let held: Vec<EncodedReview> = reviews
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| fold_of[*i] == fold)
                    .map(|(_, x)| x.clone())
                    .collect();
                let mut session = TrainSession::fresh(&hp, sizes, config)?;
                session.run(&train, &held, &hp, config, |_| {})?;
                let f1 = if session.best_f1.is_finite() { session.best_f1 } else { 0.0 };
                table.push(FoldResult { r, beta, fold, f1 });
                mean += f1;
            }
            mean /= FOLDS as f64;
            // Strict improvement keeps the smallest r, then beta, on ties.
            if best.map_or(true, |(_, _, m)| mean > m + 1e-12) {
                best = Some((r, beta, mean));
            }
        }
    }
    let (best_r, best_beta, _) = best.expect("grid is non-empty");
    Ok(CvOutcome { best_r, best_beta, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode_all, generate_synthetic, EncodeLimits, SynthSpec};
    use crate::tensor::grad_check;

    fn toy_params(values: &[(&str, DenseTensor)]) -> ModelParams {
        let tensors: BTreeMap<String, DenseTensor> = values
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        ModelParams::from_tensors(tensors, 2, 1, VocabSizes {
            n_tokens: 2,
            n_users: 1,
            n_products: 1,
        })
    }

    fn grad_map(values: &[(&str, DenseTensor)]) -> BTreeMap<String, DenseTensor> {
        values.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn adadelta_first_step_matches_hand_recurrence() {
        // rho=0.9, g=1: Eg2 = 0.1, delta = -sqrt(1e-6 / 0.100001).
        let mut params = toy_params(&[("x", DenseTensor::scalar(0.0))]);
        let mut state = AdadeltaState::new(&params, 0.9, 1e-6, 1.0).unwrap();
        let grads = grad_map(&[("x", DenseTensor::scalar(1.0))]);
        adadelta_step(&mut params, &grads, &mut state).unwrap();
        let eg2 = state.eg2()["x"].data()[0];
        assert!((eg2 - 0.1).abs() < 1e-15);
        let expected_delta = -(1e-6f64 / 0.100001).sqrt();
        assert!((expected_delta + 3.1623e-3).abs() < 1e-6);
        let x = params.get("x").unwrap().data()[0];
        assert!((x - expected_delta).abs() < 1e-15);
        let edx2 = state.edx2()["x"].data()[0];
        assert!((edx2 - 0.1 * expected_delta * expected_delta).abs() < 1e-18);
    }

    #[test]
    fn adadelta_two_steps_match_scalar_oracle() {
        let mut params = toy_params(&[("x", DenseTensor::scalar(1.0))]);
        let (rho, eps, lr) = (0.95, 1e-6, 1.0);
        let mut state = AdadeltaState::new(&params, rho, eps, lr).unwrap();
        // Scalar oracle for the same recurrence.
        let (mut eg2, mut edx2, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for g in [0.5, -0.25] {
            let grads = grad_map(&[("x", DenseTensor::scalar(g))]);
            adadelta_step(&mut params, &grads, &mut state).unwrap();
            eg2 = rho * eg2 + (1.0 - rho) * g * g;
            let delta = -lr * ((edx2 + eps).sqrt() / (eg2 + eps).sqrt()) * g;
            edx2 = rho * edx2 + (1.0 - rho) * delta * delta;
            x += delta;
        }
        assert!((params.get("x").unwrap().data()[0] - x).abs() < 1e-12);
        assert!((state.eg2()["x"].data()[0] - eg2).abs() < 1e-12);
        assert!((state.edx2()["x"].data()[0] - edx2).abs() < 1e-12);
    }

    #[test]
    fn adadelta_zero_gradient_changes_nothing_from_rest() {
        let mut params = toy_params(&[("x", DenseTensor::row(&[1.0, -2.0]))]);
        let before = params.clone();
        let mut state = AdadeltaState::new(&params, 0.95, 1e-6, 1.0).unwrap();
        let fresh = state.clone();
        let grads = grad_map(&[("x", DenseTensor::row(&[0.0, 0.0]))]);
        adadelta_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state, fresh);
    }

    #[test]
    fn adadelta_skips_params_missing_from_grads() {
        let mut params = toy_params(&[
            ("a", DenseTensor::scalar(1.0)),
            ("b", DenseTensor::scalar(2.0)),
        ]);
        let mut state = AdadeltaState::new(&params, 0.95, 1e-6, 1.0).unwrap();
        let grads = grad_map(&[("a", DenseTensor::scalar(1.0))]);
        adadelta_step(&mut params, &grads, &mut state).unwrap();
        assert_ne!(params.get("a").unwrap().data()[0], 1.0);
        assert_eq!(params.get("b").unwrap().data()[0], 2.0);
        assert_eq!(state.eg2()["b"].data()[0], 0.0);
    }

    #[test]
    fn adadelta_rejects_nan_gradient_by_name() {
        let mut params = toy_params(&[("bad", DenseTensor::scalar(0.0))]);
        let mut state = AdadeltaState::new(&params, 0.95, 1e-6, 1.0).unwrap();
        let grads = grad_map(&[("bad", DenseTensor::scalar(f64::NAN))]);
        let err = adadelta_step(&mut params, &grads, &mut state).unwrap_err();
        match err {
            TrainError::NonFiniteGradient { name } => assert_eq!(name, "bad"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn adadelta_renormalizes_hyperplane() {
        let mut params = toy_params(&[("transh_wd", DenseTensor::row(&[1.0, 0.0]))]);
        let mut state = AdadeltaState::new(&params, 0.95, 1e-6, 1.0).unwrap();
        let grads = grad_map(&[("transh_wd", DenseTensor::row(&[3.0, -4.0]))]);
        adadelta_step(&mut params, &grads, &mut state).unwrap();
        let norm = params.get("transh_wd").unwrap().l2_norm();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adadelta_rejects_shape_drift() {
        let mut params = toy_params(&[("x", DenseTensor::row(&[1.0, 2.0]))]);
        let mut state = AdadeltaState::new(&params, 0.95, 1e-6, 1.0).unwrap();
        let grads = grad_map(&[("x", DenseTensor::scalar(1.0))]);
        assert!(matches!(
            adadelta_step(&mut params, &grads, &mut state).unwrap_err(),
            TrainError::StaleState { .. }
        ));
    }

    #[test]
    fn decay_schedule() {
        let params = toy_params(&[("x", DenseTensor::scalar(0.0))]);
        let mut state = AdadeltaState::new(&params, 0.95, 1e-6, 1.0).unwrap();
        decay_lr(&mut state, 1.0, 0.95, 0);
        assert_eq!(state.lr, 1.0);
        decay_lr(&mut state, 1.0, 0.95, 3);
        assert!((state.lr - 0.95f64.powi(3)).abs() < 1e-15);
        decay_lr(&mut state, 0.5, 1.0, 7);
        assert_eq!(state.lr, 0.5);
    }

    #[test]
    fn batches_partition_and_keep_short_tail() {
        let batches = make_batches(10, 4, 3, 0);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_deterministic_per_key_and_vary_by_epoch() {
        assert_eq!(make_batches(50, 8, 9, 4), make_batches(50, 8, 9, 4));
        let perms: Vec<Vec<usize>> = (0..5).map(|e| make_batches(50, 8, 9, e).concat()).collect();
        for i in 0..perms.len() {
            for j in i + 1..perms.len() {
                assert_ne!(perms[i], perms[j], "epochs {i} and {j} collided");
            }
        }
    }

    fn tiny_corpus(seed: u64, n: usize) -> (Vec<EncodedReview>, VocabSizes) {
        let spec = SynthSpec {
            n_users: 12,
            n_products: 6,
            n_reviews: n,
            spam_rate: 0.25,
            n_templates: 4,
        };
        let reviews = generate_synthetic(seed, &spec).unwrap();
        let vocab = build_vocab(&reviews, 1);
        let limits = EncodeLimits { l: 4, t: 8, max_total: 32 };
        let encoded = encode_all(&reviews, &vocab, &limits);
        let sizes = VocabSizes {
            n_tokens: vocab.n_tokens(),
            n_users: vocab.n_users(),
            n_products: vocab.n_products(),
        };
        (encoded, sizes)
    }

    fn tiny_hp() -> HyperParams {
        HyperParams::new(4, 2, 1, 1.0, 4, 8).unwrap()
    }

    #[test]
    fn loss_decreases_over_first_epochs() {
        let (encoded, sizes) = tiny_corpus(11, 40);
        let hp = tiny_hp();
        let config = TrainConfig { epochs: 5, batch_size: 8, ..TrainConfig::default() };
        let mut session = TrainSession::fresh(&hp, sizes, &config).unwrap();
        let mut totals = Vec::new();
        session
            .run(&encoded, &[], &hp, &config, |rec| totals.push(rec.total))
            .unwrap();
        assert_eq!(totals.len(), 5);
        for w in totals.windows(2) {
            assert!(w[1] < w[0], "loss went up: {totals:?}");
        }
        assert!(session.params.all_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let (encoded, sizes) = tiny_corpus(12, 30);
        let hp = tiny_hp();
        let config = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let mut a = TrainSession::fresh(&hp, sizes, &config).unwrap();
        a.run(&encoded, &[], &hp, &config, |_| {}).unwrap();
        let mut b = TrainSession::fresh(&hp, sizes, &config).unwrap();
        b.run(&encoded, &[], &hp, &config, |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn frozen_word_embeddings_stay_put() {
        let (encoded, sizes) = tiny_corpus(13, 20);
        let hp = tiny_hp();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 8,
            freeze_word_emb: true,
            ..TrainConfig::default()
        };
        let mut session = TrainSession::fresh(&hp, sizes, &config).unwrap();
        let before = session.params.get("word_emb").unwrap().clone();
        session.run(&encoded, &[], &hp, &config, |_| {}).unwrap();
        assert_eq!(*session.params.get("word_emb").unwrap(), before);
        assert_ne!(
            *session.params.get("cls_Wc").unwrap(),
            *TrainSession::fresh(&hp, sizes, &config).unwrap().params.get("cls_Wc").unwrap()
        );
    }

    #[test]
    fn zero_entity_ablation_keeps_entities_at_zero() {
        let (encoded, sizes) = tiny_corpus(14, 20);
        let hp = tiny_hp();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            zero_entity: true,
            ..TrainConfig::default()
        };
        let mut session = TrainSession::fresh(&hp, sizes, &config).unwrap();
        session.run(&encoded, &[], &hp, &config, |_| {}).unwrap();
        for name in ["user_emb", "prod_emb"] {
            assert!(session.params.get(name).unwrap().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn beta_zero_skips_relation_loss() {
        let (encoded, sizes) = tiny_corpus(15, 20);
        let hp = HyperParams::new(4, 2, 1, 0.0, 4, 8).unwrap();
        let config = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let mut session = TrainSession::fresh(&hp, sizes, &config).unwrap();
        let mut records = Vec::new();
        session
            .run(&encoded, &[], &hp, &config, |rec| records.push(rec.clone()))
            .unwrap();
        assert_eq!(records[0].relation, 0.0);
        assert_eq!(records[0].total, records[0].ce);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let (encoded, sizes) = tiny_corpus(16, 24);
        let hp = tiny_hp();
        // lr 1e-12 freezes the model in practice, so validation F1 never
        // improves after the first epoch sets the bar.
        let config = TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-12,
            patience: 3,
            ..TrainConfig::default()
        };
        let mut session = TrainSession::fresh(&hp, sizes, &config).unwrap();
        let valid = encoded[..8].to_vec();
        let mut n_epochs = 0;
        session
            .run(&encoded[8..], &valid, &hp, &config, |_| n_epochs += 1)
            .unwrap();
        assert_eq!(n_epochs, 4, "first epoch sets best, then 3 stale epochs");
        assert_eq!(session.stale, 3);
    }

    #[test]
    fn epoch_cap_zero_runs_nothing() {
        let (encoded, sizes) = tiny_corpus(17, 12);
        let hp = tiny_hp();
        let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let mut session = TrainSession::fresh(&hp, sizes, &config).unwrap();
        let before = session.params.clone();
        session.run(&encoded, &[], &hp, &config, |_| panic!("no epochs expected")).unwrap();
        assert_eq!(session.params, before);
        assert_eq!(session.next_epoch, 0);
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        // One real review through the whole network plus both losses.
        // The seed keeps every coordinate's gradient well above the
        // checker's denominator floor, where difference-quotient
        // cancellation noise would swamp the comparison.
        let (encoded, sizes) = tiny_corpus(18, 12);
        let hp = tiny_hp();
        let params = ModelParams::init(&hp, sizes, 11).unwrap();
        let review = encoded[0].clone();
        let other = encoded
            .iter()
            .find(|r| r.user != review.user && r.product != review.product)
            .unwrap()
            .clone();
        let values: BTreeMap<String, DenseTensor> = params
            .tensors()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let worst = grad_check(&values, 1e-5, |tape, ids| -> crate::model::Result<_> {
            let bound = params.rebind(ids);
            let trace = forward(tape, &bound, &review, &hp)?;
            let mate = forward(tape, &bound, &other, &hp)?;
            let ce = classification_loss(tape, trace.logits, trace.label)?;
            let neg = crate::model::Triplet {
                head: mate.user_rep,
                ..trace.positive_triplet()
            };
            let rel = transh_loss(tape, &bound, &trace.positive_triplet(), &[neg])?;
            let terms = [LossTerms { ce, relation: Some(rel) }];
            Ok(overall_loss(tape, &terms, hp.beta)?)
        })
        .unwrap();
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn cross_validation_picks_a_grid_point_and_fills_the_table() {
        let (encoded, sizes) = tiny_corpus(19, 24);
        let hp = tiny_hp();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            grid_r: vec![2, 1],
            grid_beta: vec![1.0, 0.1],
            ..TrainConfig::default()
        };
        let out = cross_validate(&encoded, &hp, sizes, &config).unwrap();
        assert_eq!(out.table.len(), 2 * 2 * 3);
        assert!(config.grid_r.contains(&out.best_r));
        assert!(config.grid_beta.contains(&out.best_beta));
        // Grids are swept in sorted order regardless of input order.
        assert_eq!(out.table[0].r, 1);
        assert_eq!(out.table[0].beta, 0.1);
        for fold in 0..3 {
            let n: usize = out.table.iter().filter(|c| c.fold == fold).count();
            assert_eq!(n, 4);
        }
        let rerun = cross_validate(&encoded, &hp, sizes, &config).unwrap();
        assert_eq!(rerun, out);
    }

    #[test]
    fn cross_validation_needs_enough_reviews() {
        let (encoded, sizes) = tiny_corpus(20, 12);
        let hp = tiny_hp();
        let config = TrainConfig::default();
        assert!(matches!(
            cross_validate(&encoded[..8], &hp, sizes, &config).unwrap_err(),
            TrainError::BadConfig { .. }
        ));
        let empty_grid = TrainConfig { grid_r: Vec::new(), ..TrainConfig::default() };
        assert!(matches!(
            cross_validate(&encoded, &hp, sizes, &empty_grid).unwrap_err(),
            TrainError::EmptyGrid
        ));
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let bad = [
            TrainConfig { batch_size: 1, ..TrainConfig::default() },
            TrainConfig { n_neg: 0, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { lr_decay: 0.0, ..TrainConfig::default() },
            TrainConfig { lr_decay: 1.5, ..TrainConfig::default() },
            TrainConfig { rho: 1.0, ..TrainConfig::default() },
            TrainConfig { eps: -1.0, ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
        ];
        for config in bad {
            assert!(config.validate().is_err());
        }
        assert!(TrainConfig::default().validate().is_ok());
    }
}
