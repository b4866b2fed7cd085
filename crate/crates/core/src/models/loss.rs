use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datasets::Target;
use crate::error::invalid;
use crate::{Result, Scalar};

/// Negative log-likelihood losses of exponential-family output models.
///
/// * `Squared`: `½(y − z)²`, i.e. `y ~ N(z, 1)`; scalar output.
/// * `SoftmaxCrossEntropy`: `−log softmax(z)_y`. A single-output network is
///   treated as binary logistic regression with logits `(0, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Squared,
    SoftmaxCrossEntropy,
}

/// One term `weight · s sᵀ` of the output-space Fisher `E_y[s sᵀ]`, where
/// `s = ∇_z log p(y | z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSample<T> {
    pub weight: T,
    pub score: Vec<T>,
}

fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Squared => "squared",
            LossKind::SoftmaxCrossEntropy => "softmax-cross-entropy",
        }
    }

    /// Per-example loss and its gradient with respect to the outputs.
    pub fn value_and_grad<T: Scalar>(self, z: &[T], y: &Target<T>) -> Result<(T, Vec<T>)> {
        match (self, *y) {
            (LossKind::Squared, Target::Value(y)) => {
                if z.len() != 1 {
                    return invalid(format!("squared loss on {} outputs", z.len()));
                }
                let r = z[0] - y;
                Ok((T::of(0.5) * r * r, vec![r]))
            }
            (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => {
                if z.len() == 1 {
                    if c > 1 {
                        return invalid(format!("class {c} for a single-logit model"));
                    }
                    let p1 = sigmoid(z[0]);
                    let yv = T::of(c as f64);
                    // log(1 + e^z) − y z, evaluated stably.
                    let softplus = if z[0] > T::zero() {
                        z[0] + (-z[0]).exp().ln_1p()
                    } else {
                        z[0].exp().ln_1p()
                    };
                    return Ok((softplus - yv * z[0], vec![p1 - yv]));
                }
                if c >= z.len() {
                    return invalid(format!("class {c} out of range for {} logits", z.len()));
                }
                let p = softmax(z);
                let loss = -(p[c].max(T::min_positive_value())).ln();
                let mut g = p;
                g[c] -= T::one();
                Ok((loss, g))
            }
            (kind, _) => invalid(format!("target type does not match {} loss", kind.name())),
        }
    }

    /// Class probabilities (classification only).
    pub fn probabilities<T: Scalar>(self, z: &[T]) -> Vec<T> {
        if z.len() == 1 {
            let p1 = sigmoid(z[0]);
            vec![T::one() - p1, p1]
        } else {
            softmax(z)
        }
    }

    /// Exact decomposition of the output-space Fisher at `z`.
    pub fn fisher_scores<T: Scalar>(self, z: &[T]) -> Vec<ScoreSample<T>> {
        match self {
            LossKind::Squared => (0..z.len())
                .map(|k| {
                    let mut s = vec![T::zero(); z.len()];
                    s[k] = T::one();
                    ScoreSample { weight: T::one(), score: s }
                })
                .collect(),
            LossKind::SoftmaxCrossEntropy if z.len() == 1 => {
                let p1 = sigmoid(z[0]);
                vec![
                    ScoreSample { weight: p1, score: vec![T::one() - p1] },
                    ScoreSample { weight: T::one() - p1, score: vec![-p1] },
                ]
            }
            LossKind::SoftmaxCrossEntropy => {
                let p = softmax(z);
                (0..z.len())
                    .map(|c| {
                        let mut s: Vec<T> = p.iter().map(|&v| -v).collect();
                        s[c] += T::one();
                        ScoreSample { weight: p[c], score: s }
                    })
                    .collect()
            }
        }
    }

    /// Score `∇_z log p(y | z)` for one label drawn from the model.
    pub fn sample_score<T: Scalar, R: Rng>(self, z: &[T], rng: &mut R) -> Vec<T> {
        match self {
            LossKind::Squared => z
                .iter()
                .map(|_| T::of(StandardNormal.sample(rng)))
                .collect(),
            LossKind::SoftmaxCrossEntropy => {
                let p = self.probabilities(z);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut class = p.len() - 1;
                for (c, &pc) in p.iter().enumerate() {
                    acc += pc.to_f64_lossy();
                    if u < acc {
                        class = c;
                        break;
                    }
                }
                if z.len() == 1 {
                    vec![T::of(class as f64) - p[1]]
                } else {
                    let mut s: Vec<T> = p.iter().map(|&v| -v).collect();
                    s[class] += T::one();
                    s
                }
            }
        }
    }
}

/// Index of the largest output (for one logit: `z ≥ 0` means class 1).
pub fn predict_class<T: Scalar>(z: &[T]) -> usize {
    if z.len() == 1 {
        return usize::from(z[0] >= T::zero());
    }
    z.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
