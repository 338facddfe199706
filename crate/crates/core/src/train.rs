//! Mini-batch Adam training with early stopping on validation AUC.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cohort::Split;
use crate::encode::{EncodedSequence, STATIC_FEATURES};
use crate::error::{Error, Result};
use crate::eval::{auc_trapezoid, ScoredSet};
use crate::gru::{self, ModelParams};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Validation AUC gain that resets the patience counter.
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            min_improvement: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.epsilon]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        let betas = [self.beta1, self.beta2]
            .iter()
            .all(|b| *b > 0.0 && *b < 1.0);
        if !positive
            || !betas
            || self.hidden_dim == 0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.patience == 0
            || !(self.min_improvement >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid training configuration {self:?}"
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for ((theta, g), (m, v)) in tensors {
        for i in 0..theta.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            let next = theta[i] - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            if !next.is_finite() {
                return Err(Error::NonFinite("Adam update".into()));
            }
            theta[i] = next;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_auc: f64,
    pub stop_reason: StopReason,
}

/// Probabilities for a batch of sequences, in input order.
pub fn predict(params: &ModelParams, data: &[&EncodedSequence]) -> Result<Vec<f64>> {
    data.par_iter()
        .map(|s| gru::forward(params, &s.input(), &s.statics).map(|(l, _)| gru::predict_proba(l)))
        .collect()
}

pub fn scored_set(params: &ModelParams, data: &[&EncodedSequence]) -> Result<ScoredSet> {
    let scores = predict(params, data)?;
    ScoredSet::new(
        data.iter().map(|s| s.patient_id.clone()).collect(),
        scores,
        data.iter().map(|s| s.label).collect(),
    )
}

pub fn split_of(data: &[EncodedSequence], split: Split) -> Vec<&EncodedSequence> {
    data.iter().filter(|s| s.split == split).collect()
}

fn check_split(set: &[&EncodedSequence], split: Split) -> Result<()> {
    let pos = set.iter().filter(|s| s.label == 1).count();
    if pos == 0 || pos == set.len() {
        return Err(Error::Config(format!(
            "{} split must contain both label classes ({} of {} positive)",
            split.as_str(),
            pos,
            set.len()
        )));
    }
    Ok(())
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Diverged {
        epoch,
        reason: e.to_string(),
    }
}

/// Mean loss and gradient over a batch. Per-example work runs in parallel;
/// the sum is taken in batch order so the result is bit-stable.
fn batch_gradient(params: &ModelParams, batch: &[&EncodedSequence]) -> Result<(f64, ModelParams)> {
    let per_example: Vec<(f64, ModelParams)> = batch
        .par_iter()
        .map(|s| gru::loss_and_gradient(params, &s.input(), &s.statics, s.label))
        .collect::<Result<_>>()?;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per_example {
        loss += l;
        grad.add_scaled(g, 1.0);
    }
    let scale = 1.0 / batch.len() as f64;
    for t in grad.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss, grad))
}

/// Trains on the `train` split, selecting the epoch with the best validation
/// AUC (earliest on ties). Stops after `patience` epochs without a gain of
/// more than `min_improvement`.
pub fn run_training(
    data: &[EncodedSequence],
    cfg: &TrainConfig,
    vocabulary_hash: &str,
) -> Result<(Checkpoint, TrainHistory)> {
    cfg.validate()?;
    let train = split_of(data, Split::Train);
    let validation = split_of(data, Split::Validation);
    check_split(&train, Split::Train)?;
    check_split(&validation, Split::Validation)?;
    let input_dim = train[0].width();
    if data.iter().any(|s| s.width() != input_dim) {
        return Err(Error::Shape("sequences differ in feature width".into()));
    }

    let mut params = ModelParams::init(
        cfg.hidden_dim,
        input_dim,
        STATIC_FEATURES,
        rng::derive_seed(cfg.seed, "init"),
    )?;
    let mut adam = AdamState::new(&params);
    let mut batch_rng = rng::seeded(rng::derive_seed(cfg.seed, "batches"));
    let mut order = train.clone();

    let mut epochs = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, params.clone());
    let mut reference_auc = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut batch_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = batch_gradient(&params, batch).map_err(diverged(epoch))?;
            loss_sum += loss;
            adam_step(&mut params, &grad, &mut adam, cfg).map_err(diverged(epoch))?;
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "non-finite training loss".into(),
            });
        }
        let scored = scored_set(&params, &validation).map_err(diverged(epoch))?;
        let validation_auc = auc_trapezoid(&scored)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_auc,
        });

        if validation_auc > best.1 {
            best = (epoch, validation_auc, params.clone());
        }
        if validation_auc > reference_auc + cfg.min_improvement {
            reference_auc = validation_auc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }

    let (best_epoch, best_validation_auc, best_params) = best;
    let checkpoint = Checkpoint::new(best_params, vocabulary_hash, cfg.seed);
    let history = TrainHistory {
        epochs,
        best_epoch,
        best_validation_auc,
        stop_reason,
    };
    Ok((checkpoint, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(value: f64) -> ModelParams {
        let mut p = ModelParams::zeros(1, 1, 0);
        p.head.b = value;
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut p = ModelParams::zeros(2, 2, 2);
        let mut g = p.zeros_like();
        g.gru.w_z = vec![0.3, -2.0, 1e-3, 0.0];
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &g, &mut state, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the step is -lr·g/(|g| + ε)
        for (theta, grad) in p.gru.w_z.iter().zip(&g.gru.w_z) {
            let expected = -cfg.learning_rate * grad / (grad.abs() + cfg.epsilon);
            assert!((theta - expected).abs() < 1e-15);
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = TrainConfig::default();
        let mut p = ModelParams::init(3, 2, 2, 1).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let zero = p.zeros_like();
        adam_step(&mut p, &zero, &mut state, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn two_scalar_steps_match_recurrence() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let g = 0.37;
        let mut p = scalar_params(1.0);
        let mut grads = p.zeros_like();
        grads.head.b = g;
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
        adam_step(&mut p, &grads, &mut state, &cfg).unwrap();

        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.head.b - theta).abs() < 1e-12);
    }

    #[test]
    fn non_finite_update_is_an_error() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(0.0);
        let mut g = p.zeros_like();
        g.head.b = f64::NAN;
        let mut state = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut state, &cfg).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
