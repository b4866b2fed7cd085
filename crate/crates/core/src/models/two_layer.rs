use rand_distr::{Distribution, Normal};

use super::Model;
use crate::error::{dim_err, invalid};
use crate::numerics::dot;
use crate::rng;
use crate::{Result, Scalar};

/// `f(W, x) = (1/√m) Σ_r a_r · relu(xᵀ w_r)` with fixed signs `a_r = ±1`.
///
/// Only the first layer is trainable; the parameter vector is
/// `vec(w_1, …, w_m)` (each `w_r` contiguous). The ReLU derivative at
/// exactly zero is taken as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerReLU<T> {
    width: usize,
    input_dim: usize,
    weights: Vec<T>,
    signs: Vec<T>,
}

impl<T: Scalar> TwoLayerReLU<T> {
    pub fn new(input_dim: usize, weights: Vec<T>, signs: Vec<T>) -> Result<Self> {
        let width = signs.len();
        if width == 0 || input_dim == 0 {
            return invalid("two-layer network needs positive width and input dimension");
        }
        if weights.len() != width * input_dim {
            return dim_err(format!(
                "{} first-layer weights for width {width} and input {input_dim}",
                weights.len()
            ));
        }
        if signs.iter().any(|&a| a != T::one() && a != -T::one()) {
            return invalid("second-layer weights must be +1 or -1");
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return invalid("non-finite first-layer weight");
        }
        Ok(Self { width, input_dim, weights, signs })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn signs(&self) -> &[T] {
        &self.signs
    }

    /// First-layer weight vector of hidden unit `r`.
    pub fn unit(&self, r: usize) -> &[T] {
        &self.weights[r * self.input_dim..(r + 1) * self.input_dim]
    }

    fn scale(&self) -> T {
        T::one() / T::of(self.width as f64).sqrt()
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim {
            return dim_err(format!("input of length {} for p = {}", x.len(), self.input_dim));
        }
        Ok(())
    }

    pub fn output(&self, x: &[T]) -> Result<T> {
        self.check_input(x)?;
        let mut acc = T::zero();
        for r in 0..self.width {
            let pre = dot(self.unit(r), x);
            if pre > T::zero() {
                acc += self.signs[r] * pre;
            }
        }
        Ok(acc * self.scale())
    }

    /// `φ(W, x)`: block `r` is `(1/√m) a_r 1{xᵀw_r > 0} x`, so that
    /// `f(W, x) = φ(W, x)ᵀ vec(W)` and `φ` is the gradient of `f`.
    pub fn feature_map(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut phi = vec![T::zero(); self.weights.len()];
        self.feature_map_acc(x, T::one(), &mut phi);
        Ok(phi)
    }

    /// `out += c · φ(W, x)`.
    fn feature_map_acc(&self, x: &[T], c: T, out: &mut [T]) {
        let s = self.scale() * c;
        let p = self.input_dim;
        for r in 0..self.width {
            if dot(self.unit(r), x) > T::zero() {
                let coef = s * self.signs[r];
                for (o, &xk) in out[r * p..(r + 1) * p].iter_mut().zip(x) {
                    *o += coef * xk;
                }
            }
        }
    }

    pub fn descriptor(&self) -> String {
        let signs: String = self
            .signs
            .iter()
            .map(|&a| if a > T::zero() { '+' } else { '-' })
            .collect();
        format!("two-layer-relu m={} p={} signs={signs}", self.width, self.input_dim)
    }
}

/// Draws `w_r ~ N(0, κ I)` (variance `κ`) and signs `±1` with probability ½.
pub fn init_two_layer<T: Scalar>(m: usize, p: usize, kappa: f64, seed: u64) -> Result<TwoLayerReLU<T>> {
    if m == 0 || p == 0 {
        return invalid("width and input dimension must be positive");
    }
    if !(kappa > 0.0) {
        return invalid(format!("init variance must be positive, got {kappa}"));
    }
    let mut rng = rng::substream(seed, rng::stream::INIT);
    let normal = Normal::new(0.0, kappa.sqrt()).expect("valid normal");
    let signs = (0..m)
        .map(|_| if rand::Rng::random::<bool>(&mut rng) { T::one() } else { -T::one() })
        .collect();
    let weights = (0..m * p).map(|_| T::of(normal.sample(&mut rng))).collect();
    TwoLayerReLU::new(p, weights, signs)
}

impl<T: Scalar> Model<T> for TwoLayerReLU<T> {
    fn num_params(&self) -> usize {
        self.weights.len()
    }

    fn params(&self) -> &[T] {
        &self.weights
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn layer_sizes(&self) -> Vec<usize> {
        vec![self.weights.len()]
    }

    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(vec![self.output(x)?])
    }

    fn vjp_acc(&self, x: &[T], out_grad: &[T], scale: T, grad: &mut [T]) -> Result<()> {
        self.check_input(x)?;
        if out_grad.len() != 1 || grad.len() != self.weights.len() {
            return dim_err("two-layer vjp shapes");
        }
        self.feature_map_acc(x, scale * out_grad[0], grad);
        Ok(())
    }
}
