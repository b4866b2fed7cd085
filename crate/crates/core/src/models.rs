//! Networks with hand-written forward and backward passes, losses and the
//! local trainer.

mod loss;
mod mlp;
mod train;
mod two_layer;

pub use loss::{LossKind, ScoreSample};
pub use mlp::{Activation, Head, LayerShape, Mlp, MlpCache};
pub use train::{accuracy_eval, loss_eval, sgd_train, Schedule, TrainConfig, TrainOutcome};
pub use two_layer::{init_two_layer, TwoLayerReLU};

use crate::datasets::Example;
use crate::error::dim_err;
use crate::{Result, Scalar};

/// A differentiable model with a flat parameter vector.
pub trait Model<T: Scalar>: Clone + Send + Sync {
    fn num_params(&self) -> usize;

    fn params(&self) -> &[T];

    fn params_mut(&mut self) -> &mut [T];

    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// Parameter counts of consecutive layers; they sum to `num_params`.
    fn layer_sizes(&self) -> Vec<usize>;

    fn forward(&self, x: &[T]) -> Result<Vec<T>>;

    /// Adds `scale · Jᵀ g` to `grad`, where `J = ∂output/∂params` at `x`.
    fn vjp_acc(&self, x: &[T], out_grad: &[T], scale: T, grad: &mut [T]) -> Result<()>;

    /// Replaces the parameters, checking the length.
    fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.num_params() {
            return dim_err(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.num_params()
            ));
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    fn with_params(&self, params: &[T]) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    /// Mean loss over `batch` and its gradient.
    fn loss_and_gradient(&self, batch: &[Example<T>], loss: LossKind) -> Result<(T, Vec<T>)> {
        let mut grad = vec![T::zero(); self.num_params()];
        if batch.is_empty() {
            return crate::error::invalid("gradient of an empty batch");
        }
        let inv_n = T::one() / T::of(batch.len() as f64);
        let mut total = T::zero();
        for ex in batch {
            let z = self.forward(&ex.x)?;
            let (l, dz) = loss.value_and_grad(&z, &ex.y)?;
            total += l;
            self.vjp_acc(&ex.x, &dz, inv_n, &mut grad)?;
        }
        Ok((total * inv_n, grad))
    }

    fn gradient(&self, batch: &[Example<T>], loss: LossKind) -> Result<Vec<T>> {
        self.loss_and_gradient(batch, loss).map(|(_, g)| g)
    }
}

/// Either architecture, for code that picks one at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum Network<T> {
    TwoLayer(TwoLayerReLU<T>),
    Mlp(Mlp<T>),
}

impl<T: Scalar> Network<T> {
    /// Text descriptor used by checkpoints.
    pub fn descriptor(&self) -> String {
        match self {
            Network::TwoLayer(m) => m.descriptor(),
            Network::Mlp(m) => m.descriptor(),
        }
    }
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Network::TwoLayer($m) => $e,
            Network::Mlp($m) => $e,
        }
    };
}

impl<T: Scalar> Model<T> for Network<T> {
    fn num_params(&self) -> usize {
        dispatch!(self, m => m.num_params())
    }

    fn params(&self) -> &[T] {
        dispatch!(self, m => m.params())
    }

    fn params_mut(&mut self) -> &mut [T] {
        dispatch!(self, m => m.params_mut())
    }

    fn input_dim(&self) -> usize {
        dispatch!(self, m => m.input_dim())
    }

    fn output_dim(&self) -> usize {
        dispatch!(self, m => m.output_dim())
    }

    fn layer_sizes(&self) -> Vec<usize> {
        dispatch!(self, m => m.layer_sizes())
    }

    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        dispatch!(self, m => m.forward(x))
    }

    fn vjp_acc(&self, x: &[T], out_grad: &[T], scale: T, grad: &mut [T]) -> Result<()> {
        dispatch!(self, m => m.vjp_acc(x, out_grad, scale, grad))
    }

    fn loss_and_gradient(&self, batch: &[Example<T>], loss: LossKind) -> Result<(T, Vec<T>)> {
        dispatch!(self, m => m.loss_and_gradient(batch, loss))
    }
}

impl<T> From<TwoLayerReLU<T>> for Network<T> {
    fn from(m: TwoLayerReLU<T>) -> Self {
        Network::TwoLayer(m)
    }
}

impl<T> From<Mlp<T>> for Network<T> {
    fn from(m: Mlp<T>) -> Self {
        Network::Mlp(m)
    }
}
