use rand::seq::SliceRandom;

use super::loss::predict_class;
use super::{LossKind, Model};
use crate::datasets::Example;
use crate::error::invalid;
use crate::rng;
use crate::{Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// A fixed number of optimizer steps.
    Steps(usize),
    /// Passes over the shuffled client data.
    Epochs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
}

impl TrainConfig {
    /// Full-batch gradient descent for `steps` iterations.
    pub fn full_batch(eta: f64, steps: usize) -> Self {
        Self {
            eta,
            momentum: 0.0,
            schedule: Schedule::Steps(steps),
            batch_size: usize::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return invalid(format!("step size must be non-negative, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M, T> {
    pub model: M,
    pub steps: usize,
    /// Mini-batch loss observed before each step.
    pub step_losses: Vec<T>,
    /// Set when a non-finite loss or gradient stopped training; `model` is
    /// then the last finite iterate.
    pub diverged: bool,
}

/// Local training: (mini-batch) gradient descent with heavy-ball momentum
/// `v ← μ v + g; W ← W − η v`. Shuffling draws one permutation per epoch
/// from the stream identified by `seed`.
pub fn sgd_train<T: Scalar, M: Model<T>>(
    model: &M,
    data: &[Example<T>],
    cfg: &TrainConfig,
    loss: LossKind,
    seed: u64,
) -> Result<TrainOutcome<M, T>> {
    cfg.validate()?;
    if data.is_empty() {
        return invalid("no training data");
    }
    let mut model = model.clone();
    let n = data.len();
    let batch = cfg.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(batch);
    let total_steps = match cfg.schedule {
        Schedule::Steps(k) => k,
        Schedule::Epochs(e) => e * batches_per_epoch,
    };
    let eta = T::of(cfg.eta);
    let mu = T::of(cfg.momentum);
    let mut velocity = vec![T::zero(); model.num_params()];
    let mut rng = rng::substream(seed, rng::stream::TRAIN);
    let mut order: Vec<usize> = (0..n).collect();
    let full_batch = batch == n;
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut scratch: Vec<Example<T>> = Vec::with_capacity(batch);

    for step in 0..total_steps {
        let pos = step % batches_per_epoch;
        let (value, grad) = if full_batch {
            model.loss_and_gradient(data, loss)?
        } else {
            if pos == 0 {
                order.shuffle(&mut rng);
            }
            let end = ((pos + 1) * batch).min(n);
            scratch.clear();
            scratch.extend(order[pos * batch..end].iter().map(|&i| data[i].clone()));
            model.loss_and_gradient(&scratch, loss)?
        };
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Ok(TrainOutcome { model, steps: step, step_losses, diverged: true });
        }
        step_losses.push(value);
        let previous = model.params().to_vec();
        for ((w, v), &g) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = mu * *v + g;
            *w -= eta * *v;
        }
        if model.params().iter().any(|w| !w.is_finite()) {
            model.set_params(&previous)?;
            return Ok(TrainOutcome { model, steps: step, step_losses, diverged: true });
        }
    }
    Ok(TrainOutcome { model, steps: total_steps, step_losses, diverged: false })
}

/// Mean per-example loss.
pub fn loss_eval<T: Scalar, M: Model<T>>(model: &M, examples: &[Example<T>], loss: LossKind) -> Result<T> {
    if examples.is_empty() {
        return invalid("loss of an empty example set");
    }
    let mut total = T::zero();
    for ex in examples {
        let z = model.forward(&ex.x)?;
        total += loss.value_and_grad(&z, &ex.y)?.0;
    }
    Ok(total / T::of(examples.len() as f64))
}

/// Fraction of examples whose arg-max output matches the class label.
pub fn accuracy_eval<T: Scalar, M: Model<T>>(model: &M, examples: &[Example<T>]) -> Result<f64> {
    if examples.is_empty() {
        return invalid("accuracy of an empty example set");
    }
    let mut correct = 0usize;
    for ex in examples {
        let class = ex
            .y
            .class()
            .ok_or_else(|| crate::Error::InvalidInput("accuracy needs class labels".into()))?;
        if predict_class(&model.forward(&ex.x)?) == class {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}
