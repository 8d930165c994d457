//! Desk-scale backbone and the contract the trainer, scorers and
//! visualization layer rely on.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Spatial layout of one input example, stored row-major as `C·H·W` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// What the training loop, scorers and projector need from a network.
pub trait Classifier {
    /// Intermediate values kept from a forward pass for backpropagation.
    type Cache;

    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Width of the penultimate representation; constant for a given model.
    fn feature_dim(&self) -> usize;

    fn forward(&self, inputs: &Array2<f64>) -> Array2<f64>;
    fn penultimate(&self, inputs: &Array2<f64>) -> Array2<f64>;

    fn forward_cached(&self, inputs: &Array2<f64>) -> (Array2<f64>, Self::Cache);
    /// Gradient of a scalar loss w.r.t. the flattened parameters, given the
    /// loss gradient w.r.t. the logits of the cached forward pass.
    fn backward(&self, cache: &Self::Cache, grad_logits: &Array2<f64>) -> Vec<f64>;

    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// Serialized architecture description stored alongside checkpoints.
    fn architecture(&self) -> String {
        String::new()
    }
}

/// Hex SHA-256 over the little-endian bytes of the flattened parameters.
pub fn param_hash<M: Classifier>(model: &M) -> String {
    let mut hasher = Sha256::new();
    for p in model.params() {
        hasher.update(p.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input: InputShape,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input.dim() == 0 {
            return Err(Error::invalid_arg("model input dimension must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid_arg("model needs at least one class"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid_arg("hidden layer widths must be positive"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input.dim();
        for &h in &self.hidden {
            dims.push((h, fan_in));
            fan_in = h;
        }
        dims.push((self.num_classes, fan_in));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Dense {
    fn affine(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Fully connected network over flattened images. The last hidden
/// activation is the penultimate feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
}

pub struct MlpCache {
    /// Input to every layer (the first is the raw batch).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// Uniform fan-in initialization, deterministic in `seed`.
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| {
                let bound = (6.0 / inp as f64).sqrt() * 0.5;
                Dense {
                    weight: Array2::from_shape_fn((out, inp), |_| rng.random_range(-bound..bound)),
                    bias: Array1::zeros(out),
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn from_params(spec: MlpSpec, params: &[f64]) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        model.set_params(params)?;
        Ok(model)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn hidden_forward(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let act = self.spec.activation;
        let mut h = inputs.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            h = layer.affine(&h).mapv_into(|z| act.apply(z));
        }
        h
    }
}

impl Classifier for Mlp {
    type Cache = MlpCache;

    fn input_dim(&self) -> usize {
        self.spec.input.dim()
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn feature_dim(&self) -> usize {
        self.spec
            .hidden
            .last()
            .copied()
            .unwrap_or_else(|| self.spec.input.dim())
    }

    fn forward(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let h = self.hidden_forward(inputs);
        self.layers[self.layers.len() - 1].affine(&h)
    }

    fn penultimate(&self, inputs: &Array2<f64>) -> Array2<f64> {
        self.hidden_forward(inputs)
    }

    fn forward_cached(&self, inputs: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let act = self.spec.activation;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len() - 1),
        };
        let mut h = inputs.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            let z = layer.affine(&h);
            cache.inputs.push(h);
            h = z.mapv(|v| act.apply(v));
            cache.pre.push(z);
        }
        let logits = self.layers[self.layers.len() - 1].affine(&h);
        cache.inputs.push(h);
        (logits, cache)
    }

    fn backward(&self, cache: &MlpCache, grad_logits: &Array2<f64>) -> Vec<f64> {
        let act = self.spec.activation;
        let n_layers = self.layers.len();
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n_layers);
        let mut delta = grad_logits.clone();
        for idx in (0..n_layers).rev() {
            let input = &cache.inputs[idx];
            grads.push((delta.t().dot(input), delta.sum_axis(Axis(0))));
            if idx > 0 {
                let mut upstream = delta.dot(&self.layers[idx].weight);
                let z = &cache.pre[idx - 1];
                let a = &cache.inputs[idx];
                ndarray::Zip::from(&mut upstream)
                    .and(z)
                    .and(a)
                    .for_each(|g, &z, &a| *g *= act.derivative(z, a));
                delta = upstream;
            }
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (gw, gb) in grads {
            flat.extend(gw.iter());
            flat.extend(gb.iter());
        }
        flat
    }

    fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            flat.extend(layer.weight.iter());
            flat.extend(layer.bias.iter());
        }
        flat
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::invalid_arg(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    fn architecture(&self) -> String {
        serde_json::to_string(&self.spec).expect("spec serializes")
    }
}
