//! Optimization loop: AdamW with decoupled weight decay, seeded mini-batching,
//! early stopping on validation loss, and trial-grouped fold construction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::{pearson_value_grad_stabilized, EnvelopeSet, LossKind};
use crate::decoder::{backward, forward, init, DecoderConfig, DecoderParams, EegSegment};
use crate::error::{Error, Result};

/// Training hyperparameters. Defaults follow the reference protocol:
/// lr 5e-4, weight decay 5e-4, batch 64, up to 100 epochs, patience 10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 5e-4,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss: LossKind::Pcc,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite()
            || self.learning_rate <= 0.0
            || self.weight_decay < 0.0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.patience == 0
            || !(self.beta1 > 0.0 && self.beta1 < 1.0)
            || !(self.beta2 > 0.0 && self.beta2 < 1.0)
            || !self.epsilon.is_finite()
            || self.epsilon <= 0.0
        {
            return Err(Error::Config("invalid training configuration".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Training objective. `NegSumExperimental` is the ill-posed negative-sum
/// variant, available only through [`train_model_with_objective`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Pcc,
    DeltaPcc,
    NegSumExperimental,
}

impl From<LossKind> for Objective {
    fn from(k: LossKind) -> Self {
        match k {
            LossKind::Pcc => Objective::Pcc,
            LossKind::DeltaPcc => Objective::DeltaPcc,
        }
    }
}

/// Variance floor applied to the prediction side of the training loss so a
/// collapsed (e.g. freshly zero-initialized) decoder still receives a finite
/// gradient toward the envelopes. Reference streams are never stabilized.
const TRAIN_EPS: f64 = 1e-12;

/// Training-path loss value and gradient with respect to the prediction.
pub(crate) fn objective_loss(
    objective: Objective,
    yhat: &[f64],
    env: &EnvelopeSet,
) -> Result<(f64, Vec<f64>)> {
    let t = yhat.len();
    if t != env.n_samples() {
        return Err(Error::ShapeMismatch(format!(
            "prediction length {t} vs envelope length {}",
            env.n_samples()
        )));
    }
    let (ra, ga) = pearson_value_grad_stabilized(yhat, env.attended(), TRAIN_EPS)?;
    let mut value = -ra;
    let mut grad: Vec<f64> = ga.into_iter().map(|v| -v).collect();
    let unatt_scale = match objective {
        Objective::Pcc => return Ok((value, grad)),
        Objective::DeltaPcc => 1.0 / (env.n_speakers() - 1) as f64,
        Objective::NegSumExperimental => 1.0,
    };
    for u in env.unattended() {
        let (ru, gu) = pearson_value_grad_stabilized(yhat, u, TRAIN_EPS)?;
        value += unatt_scale * ru;
        for (g, gu_t) in grad.iter_mut().zip(gu) {
            *g += unatt_scale * gu_t;
        }
    }
    Ok((value, grad))
}

/// First/second moment buffers and step counter for AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
        }
    }
}

/// One AdamW step with decoupled weight decay:
/// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len()
        || state.first_moment.len() != params.len()
        || state.second_moment.len() != params.len()
    {
        return Err(Error::ShapeMismatch("optimizer vector lengths differ".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index: i });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.first_moment[i] = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
        state.second_moment[i] = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.first_moment[i] / bc1;
        let v_hat = state.second_moment[i] / bc2;
        params[i] -=
            cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

/// One epoch's losses plus the stopping bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Plain-text table: epoch, train_loss, val_loss.
    pub fn to_table(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s.push_str(&format!(
            "# stopped_epoch={} best_epoch={}\n",
            self.stopped_epoch, self.best_epoch
        ));
        s
    }
}

pub type Sample = (EegSegment, EnvelopeSet);

fn mean_objective_loss(
    objective: Objective,
    params: &DecoderParams,
    dcfg: &DecoderConfig,
    samples: &[Sample],
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (x, env) in samples {
        let y = forward(params, dcfg, x)?;
        match objective_loss(objective, &y, env) {
            Ok((v, _)) => {
                total += v;
                n += 1;
            }
            Err(Error::DegenerateVariance { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::DataQuality("every validation segment was degenerate".into()));
    }
    Ok(total / n as f64)
}

/// Trains one decoder with the objective taken from the train config.
pub fn train_model(
    dcfg: &DecoderConfig,
    tcfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
) -> Result<(DecoderParams, TrainHistory)> {
    train_model_with_objective(dcfg, tcfg, tcfg.loss.into(), train, val)
}

/// Training loop: per epoch, seeded shuffle, batch-mean gradients, one AdamW
/// step per batch (final partial batch kept), validation loss after each
/// epoch, best-checkpoint early stopping.
pub fn train_model_with_objective(
    dcfg: &DecoderConfig,
    tcfg: &TrainConfig,
    objective: Objective,
    train: &[Sample],
    val: &[Sample],
) -> Result<(DecoderParams, TrainHistory)> {
    tcfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training segments"));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("validation segments"));
    }
    let mut params = init(dcfg)?;
    let mut state = OptimizerState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();
    let mut no_improve = 0usize;
    let mut stopped_epoch = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=tcfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        let mut degenerate = 0usize;
        for batch in order.chunks(tcfg.batch_size) {
            let mut batch_grad = vec![0.0; params.len()];
            let mut batch_n = 0usize;
            for &idx in batch {
                let (x, env) = &train[idx];
                let y = forward(&params, dcfg, x)?;
                let (v, dy) = match objective_loss(objective, &y, env) {
                    Ok(r) => r,
                    Err(Error::DegenerateVariance { .. }) => {
                        degenerate += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let g = backward(&params, dcfg, x, &dy)?;
                for (b, gi) in batch_grad.iter_mut().zip(&g.values) {
                    *b += gi;
                }
                epoch_loss += v;
                epoch_n += 1;
                batch_n += 1;
            }
            if batch_n == 0 {
                continue;
            }
            for b in &mut batch_grad {
                *b /= batch_n as f64;
            }
            adamw_step(&mut params.values, &batch_grad, &mut state, tcfg)?;
        }
        if degenerate * 2 > train.len() {
            return Err(Error::DataQuality(format!(
                "{degenerate} of {} training segments degenerate",
                train.len()
            )));
        }
        if epoch_n == 0 {
            return Err(Error::DataQuality("no usable training segments".into()));
        }
        let train_loss = epoch_loss / epoch_n as f64;
        let val_loss = mean_objective_loss(objective, &params, dcfg, val)?;
        history.push(EpochRecord { epoch, train_loss, val_loss });
        stopped_epoch = epoch;
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
            no_improve = 0;
        } else {
            no_improve += 1;
            if no_improve >= tcfg.patience {
                break;
            }
        }
    }

    Ok((best_params, TrainHistory { epochs: history, stopped_epoch, best_epoch }))
}

/// One cross-validation fold of trial identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Groups trials into `n_folds` disjoint test sets covering every trial once;
/// within each fold one seeded non-test trial becomes the validation trial and
/// the remainder train.
pub fn loto_folds(trial_ids: &[String], n_folds: usize, seed: u64) -> Result<Vec<Fold>> {
    let mut distinct: Vec<String> = trial_ids.to_vec();
    distinct.sort();
    distinct.dedup();
    if n_folds == 0 {
        return Err(Error::Config("need at least one fold".into()));
    }
    let n = distinct.len();
    if n < n_folds || n < 3 {
        return Err(Error::InsufficientTrials { got: n, need: n_folds.max(3) });
    }
    let max_group = n.div_ceil(n_folds);
    if n - max_group < 2 {
        return Err(Error::InsufficientTrials { got: n, need: max_group + 2 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = distinct;
    shuffled.shuffle(&mut rng);

    // Near-equal contiguous chunks of the shuffled order.
    let base = n / n_folds;
    let extra = n % n_folds;
    let mut folds = Vec::with_capacity(n_folds);
    let mut start = 0usize;
    for f in 0..n_folds {
        let size = base + usize::from(f < extra);
        let test_ids: Vec<String> = shuffled[start..start + size].to_vec();
        start += size;
        let mut rest: Vec<String> = shuffled
            .iter()
            .filter(|id| !test_ids.contains(id))
            .cloned()
            .collect();
        let val_idx = rand::Rng::gen_range(&mut rng, 0..rest.len());
        let val = rest.remove(val_idx);
        folds.push(Fold { train_ids: rest, val_ids: vec![val], test_ids });
    }
    Ok(folds)
}
