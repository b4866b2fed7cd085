use rand_distr::{Distribution, Normal};

use super::Model;
use crate::error::{dim_err, invalid};
use crate::numerics::{axpy, dot};
use crate::rng;
use crate::{Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Regression,
    SoftmaxClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    /// Parameters of the layer: weights plus bias.
    pub fn num_params(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

/// Fully connected network.
///
/// Each layer's parameters are stored as the column-major flattening of the
/// `outputs × (inputs + 1)` matrix `[W | b]`: column `j < inputs` holds the
/// weights from input `j`, the last column holds the bias. This matches the
/// Kronecker ordering used for K-FAC blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<T>,
    head: Head,
}

/// Per-layer inputs and pre-activations from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub inputs: Vec<Vec<T>>,
    pub pre_activations: Vec<Vec<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `dims = [m_0, m_1, …, m_L]`; hidden layers use ReLU, the last is linear.
    pub fn zeros(dims: &[usize], head: Head) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return invalid(format!("invalid layer dimensions {dims:?}"));
        }
        let layers: Vec<LayerShape> = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: if l + 2 == dims.len() { Activation::Identity } else { Activation::Relu },
            })
            .collect();
        Self::from_layers(layers, head)
    }

    pub fn from_layers(layers: Vec<LayerShape>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return invalid("MLP needs at least one layer");
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return dim_err(format!(
                    "layer output {} does not feed input {}",
                    pair[0].outputs, pair[1].inputs
                ));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return invalid("final layer must be linear");
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.num_params();
        }
        offsets.push(total);
        Ok(Self {
            layers,
            offsets,
            params: vec![T::zero(); total],
            head,
        })
    }

    /// He-normal weights (`N(0, 2/fan_in)`), zero biases.
    pub fn init(dims: &[usize], head: Head, seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(dims, head)?;
        let mut rng = rng::substream(seed, rng::stream::INIT);
        for l in 0..mlp.layers.len() {
            let shape = mlp.layers[l];
            let normal = Normal::new(0.0, (2.0 / shape.inputs as f64).sqrt()).expect("normal");
            let weights = shape.inputs * shape.outputs;
            let block = mlp.layer_params_mut(l);
            for w in &mut block[..weights] {
                *w = T::of(normal.sample(&mut rng));
            }
        }
        Ok(mlp)
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    /// `[m_0, …, m_L]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }

    pub fn layer_params(&self, l: usize) -> &[T] {
        &self.params[self.layer_range(l)]
    }

    pub fn layer_params_mut(&mut self, l: usize) -> &mut [T] {
        let r = self.layer_range(l);
        &mut self.params[r]
    }

    pub fn descriptor(&self) -> String {
        let dims: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        let head = match self.head {
            Head::Regression => "regression",
            Head::SoftmaxClassification => "softmax",
        };
        let acts: Vec<&str> = self
            .layers
            .iter()
            .map(|l| match l.activation {
                Activation::Relu => "relu",
                Activation::Identity => "identity",
            })
            .collect();
        format!("mlp dims={} acts={} head={head}", dims.join("-"), acts.join(","))
    }

    /// Forward pass keeping every layer input and pre-activation.
    pub fn forward_cached(&self, x: &[T]) -> Result<MlpCache<T>> {
        if x.len() != self.layers[0].inputs {
            return dim_err(format!(
                "input of length {} for an MLP expecting {}",
                x.len(),
                self.layers[0].inputs
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (l, shape) in self.layers.iter().enumerate() {
            let p = self.layer_params(l);
            let out = shape.outputs;
            let mut z = p[shape.inputs * out..].to_vec();
            for (j, &aj) in a.iter().enumerate() {
                if aj != T::zero() {
                    axpy(aj, &p[j * out..(j + 1) * out], &mut z);
                }
            }
            let next = match shape.activation {
                Activation::Relu => z.iter().map(|&v| v.max(T::zero())).collect(),
                Activation::Identity => z.clone(),
            };
            inputs.push(a);
            pre_activations.push(z);
            a = next;
        }
        Ok(MlpCache { inputs, pre_activations })
    }

    /// Back-propagates an output gradient, returning `∂/∂z_l` (pre-activation
    /// gradients) for every layer.
    pub fn backward_deltas(&self, cache: &MlpCache<T>, out_grad: &[T]) -> Result<Vec<Vec<T>>> {
        let last = self.layers.len() - 1;
        if out_grad.len() != self.layers[last].outputs {
            return dim_err("output gradient length");
        }
        let mut deltas = vec![Vec::new(); self.layers.len()];
        deltas[last] = out_grad.to_vec();
        for l in (1..=last).rev() {
            let shape = self.layers[l];
            let p = self.layer_params(l);
            let below = &cache.pre_activations[l - 1];
            let below_act = self.layers[l - 1].activation;
            let d: Vec<T> = (0..shape.inputs)
                .map(|j| {
                    let back = dot(&p[j * shape.outputs..(j + 1) * shape.outputs], &deltas[l]);
                    match below_act {
                        Activation::Relu if below[j] <= T::zero() => T::zero(),
                        _ => back,
                    }
                })
                .collect();
            deltas[l - 1] = d;
        }
        Ok(deltas)
    }
}

impl<T: Scalar> Model<T> for Mlp<T> {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(LayerShape::num_params).collect()
    }

    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let mut cache = self.forward_cached(x)?;
        Ok(cache.pre_activations.pop().expect("at least one layer"))
    }

    fn vjp_acc(&self, x: &[T], out_grad: &[T], scale: T, grad: &mut [T]) -> Result<()> {
        if grad.len() != self.params.len() {
            return dim_err("gradient buffer length");
        }
        let cache = self.forward_cached(x)?;
        let deltas = self.backward_deltas(&cache, out_grad)?;
        for (l, shape) in self.layers.iter().enumerate() {
            let range = self.layer_range(l);
            let g = &mut grad[range];
            let out = shape.outputs;
            let delta: Vec<T> = deltas[l].iter().map(|&d| d * scale).collect();
            for (j, &aj) in cache.inputs[l].iter().enumerate() {
                if aj != T::zero() {
                    axpy(aj, &delta, &mut g[j * out..(j + 1) * out]);
                }
            }
            axpy(T::one(), &delta, &mut g[shape.inputs * out..]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_column_major_with_bias_last() {
        let mut m = Mlp::<f64>::zeros(&[2, 3], Head::Regression).unwrap();
        assert_eq!(m.num_params(), 9);
        // W = [[1,2],[3,4],[5,6]], b = (7,8,9)
        m.set_params(&[1.0, 3.0, 5.0, 2.0, 4.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let z = m.forward(&[1.0, 10.0]).unwrap();
        assert_eq!(z, vec![1.0 + 20.0 + 7.0, 3.0 + 40.0 + 8.0, 5.0 + 60.0 + 9.0]);
    }

    #[test]
    fn dims_must_chain() {
        let bad = vec![
            LayerShape { inputs: 2, outputs: 3, activation: Activation::Relu },
            LayerShape { inputs: 4, outputs: 1, activation: Activation::Identity },
        ];
        assert!(Mlp::<f64>::from_layers(bad, Head::Regression).is_err());
        let relu_last = vec![LayerShape { inputs: 2, outputs: 1, activation: Activation::Relu }];
        assert!(Mlp::<f64>::from_layers(relu_last, Head::Regression).is_err());
        assert!(Mlp::<f64>::zeros(&[3], Head::Regression).is_err());
    }

    #[test]
    fn relu_hidden_layer() {
        let mut m = Mlp::<f64>::zeros(&[1, 2, 1], Head::Regression).unwrap();
        // hidden: w = (1, -1), b = 0 ; output: (1, 1), b = 0
        m.set_params(&[1.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(m.forward(&[2.0]).unwrap(), vec![2.0]);
        assert_eq!(m.forward(&[-3.0]).unwrap(), vec![3.0]);
        assert_eq!(m.layer_sizes(), vec![4, 3]);
    }
}
