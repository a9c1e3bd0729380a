//! Dense feed-forward networks with analytic backpropagation.
//!
//! Parameters flatten layer by layer: the weight matrix in row-major order
//! (`out × in`) followed by the bias vector. Optimizers and gradient checks
//! work on that flat layout.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{LayerRecord, NetworkCheckpoint, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_sampled, gradient_check, min_abs_preactivation, numeric_gradient,
    relative_error, GradCheckReport, DEFAULT_STEP,
};

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
            Activation::Softmax => {
                for mut row in z.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
            }
        }
    }

    /// Gradient w.r.t. pre-activations given the activation output and the
    /// gradient w.r.t. that output.
    fn backprop(self, out: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => grad.clone(),
            Activation::Relu => {
                let mut g = grad.clone();
                g.zip_mut_with(out, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                g
            }
            Activation::Sigmoid => {
                let mut g = grad.clone();
                g.zip_mut_with(out, |g, &a| *g *= a * (1.0 - a));
                g
            }
            Activation::Softmax => {
                let mut g = grad.clone();
                for (mut gr, pr) in g.rows_mut().into_iter().zip(out.rows()) {
                    let dot = gr.dot(&pr);
                    gr.zip_mut_with(&pr, |g, &p| *g = p * (*g - dot));
                }
                g
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct DenseNetwork {
    layers: Vec<Layer>,
    /// Changes whenever parameters change; caches remember the stamp they
    /// were produced under.
    stamp: u64,
}

impl PartialEq for DenseNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activation trace of a batch forward pass: the input followed by every
/// layer output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache always holds the input")
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Flat parameter gradient in the network's layout.
    pub params: Vec<f64>,
    /// Gradient w.r.t. the network input, one row per batch row.
    pub input: Array2<f64>,
}

impl DenseNetwork {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.biases.len() != l.out_dim() {
                return Err(Error::invalid(format!("layer {k}: bias length != out dim")));
            }
            if l.activation == Activation::Softmax && k + 1 != layers.len() {
                return Err(Error::invalid("softmax is only allowed on the final layer"));
            }
            if k > 0 && layers[k - 1].out_dim() != l.in_dim() {
                return Err(Error::invalid(format!(
                    "layer {k} expects {} inputs but layer {} produces {}",
                    l.in_dim(),
                    k - 1,
                    layers[k - 1].out_dim()
                )));
            }
            if l.weights.iter().chain(l.biases.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("layer {k} has non-finite parameters")));
            }
        }
        Ok(Self { layers, stamp: fresh_stamp() })
    }

    /// Glorot-uniform weights, zero biases. `dims` lists every layer width
    /// including the input, so `activations.len() == dims.len() - 1`.
    pub fn new(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        Self::check_shape(dims, activations)?;
        let mut rng = seeded(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..=bound)),
                    biases: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        Self::check_shape(dims, activations)?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| Layer {
                weights: Array2::zeros((d[1], d[0])),
                biases: Array1::zeros(d[1]),
                activation,
            })
            .collect();
        Self::from_layers(layers)
    }

    fn check_shape(dims: &[usize], activations: &[Activation]) -> Result<()> {
        if dims.len() < 2 || activations.len() + 1 != dims.len() {
            return Err(Error::invalid("need dims.len() == activations.len() + 1 >= 2"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(Layer::out_dim).unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.biases.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = params[off];
                off += 1;
            }
            for b in l.biases.iter_mut() {
                *b = params[off];
                off += 1;
            }
        }
        self.stamp = fresh_stamp();
        Ok(())
    }

    /// Mutable access to one layer; invalidates outstanding caches.
    pub fn layer_mut(&mut self, k: usize) -> Option<&mut Layer> {
        self.stamp = fresh_stamp();
        self.layers.get_mut(k)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<ForwardCache> {
        if input.ncols() != self.in_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, network expects {}",
                input.ncols(),
                self.in_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_owned());
        for l in &self.layers {
            let prev = activations.last().expect("non-empty");
            let mut z = prev.dot(&l.weights.t());
            z += &l.biases;
            l.activation.apply(&mut z);
            activations.push(z);
        }
        Ok(ForwardCache { stamp: self.stamp, activations })
    }

    /// Output only; no cache retained.
    pub fn predict_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut cache = self.forward_batch(input)?;
        Ok(cache.activations.pop().expect("non-empty"))
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::invalid(e.to_string()))?;
        let cache = self.forward_batch(view)?;
        Ok((cache.output().row(0).to_vec(), cache))
    }

    pub fn backward_batch(&self, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> Result<Gradients> {
        self.check_backward(cache, output_grad)?;
        let mut per_layer: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        let mut grad = output_grad.to_owned();
        for (k, l) in self.layers.iter().enumerate().rev() {
            let dz = l.activation.backprop(&cache.activations[k + 1], &grad);
            let dw = dz.t().dot(&cache.activations[k]);
            let db = dz.sum_axis(Axis(0));
            grad = dz.dot(&l.weights);
            per_layer.push((dw, db));
        }
        per_layer.reverse();
        let mut params = Vec::with_capacity(self.parameter_count());
        for (dw, db) in per_layer {
            params.extend(dw.iter());
            params.extend(db.iter());
        }
        Ok(Gradients { params, input: grad })
    }

    /// Gradient w.r.t. the input only, skipping parameter gradients.
    pub fn input_gradient(&self, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_backward(cache, output_grad)?;
        let mut grad = output_grad.to_owned();
        for (k, l) in self.layers.iter().enumerate().rev() {
            grad = l.activation.backprop(&cache.activations[k + 1], &grad).dot(&l.weights);
        }
        Ok(grad)
    }

    fn check_backward(&self, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> Result<()> {
        if cache.stamp != self.stamp || cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::invalid("forward cache does not belong to this network state"));
        }
        if output_grad.dim() != cache.output().dim() {
            return Err(Error::invalid(format!(
                "output gradient shape {:?} != output shape {:?}",
                output_grad.dim(),
                cache.output().dim()
            )));
        }
        Ok(())
    }

    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Gradients> {
        let view = ArrayView2::from_shape((1, output_grad.len()), output_grad)
            .map_err(|e| Error::invalid(e.to_string()))?;
        self.backward_batch(cache, view)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_layer_passes_input() {
        let layer = Layer {
            weights: Array2::eye(3),
            biases: Array1::zeros(3),
            activation: Activation::Identity,
        };
        let net = DenseNetwork::from_layers(vec![layer]).unwrap();
        let (out, _) = net.forward(&[1.0, -2.0, 3.5]).unwrap();
        assert_eq!(out, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn zero_sigmoid_layer_outputs_half() {
        let net = DenseNetwork::zeros(&[4, 3], &[Activation::Sigmoid]).unwrap();
        let (out, _) = net.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let net = DenseNetwork::new(&[5, 8, 6], &[Activation::Relu, Activation::Softmax], 3).unwrap();
        let x = Array2::from_shape_fn((10, 5), |(i, j)| (i as f64 - j as f64) * 0.7);
        let out = net.predict_batch(x.view()).unwrap();
        for row in out.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softmax_must_be_last() {
        let r = DenseNetwork::new(&[2, 2, 2], &[Activation::Softmax, Activation::Identity], 0);
        assert!(r.is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = DenseNetwork::new(&[3, 2], &[Activation::Identity], 0).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::InvalidArgument(_))));
        let (_, cache) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(net.backward(&cache, &[1.0]).is_err());
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = DenseNetwork::new(&[3, 2], &[Activation::Identity], 0).unwrap();
        let (_, cache) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        let p = net.params();
        net.set_params(&p).unwrap();
        assert!(matches!(net.backward(&cache, &[1.0, 1.0]), Err(Error::InvalidArgument(_))));
        let other = DenseNetwork::new(&[3, 2], &[Activation::Identity], 0).unwrap();
        assert!(other.backward(&cache, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradient() {
        let net = DenseNetwork::new(&[4, 6, 3], &[Activation::Relu, Activation::Sigmoid], 1).unwrap();
        let (_, cache) = net.forward(&[0.3, -0.2, 0.9, 1.1]).unwrap();
        let g = net.backward(&cache, &[0.0; 3]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert_eq!(g.params.len(), net.parameter_count());
    }

    #[test]
    fn sigmoid_derivative_at_origin() {
        let net = DenseNetwork::zeros(&[1, 1], &[Activation::Sigmoid]).unwrap();
        let (_, cache) = net.forward(&[1.0]).unwrap();
        let g = net.backward(&cache, &[1.0]).unwrap();
        // d sigmoid(w x + b) / dw at w = 0, x = 1
        assert_eq!(g.params[0], 0.25);
    }

    #[test]
    fn params_round_trip() {
        let mut net = DenseNetwork::new(&[2, 3, 1], &[Activation::Relu, Activation::Identity], 5).unwrap();
        let p: Vec<f64> = (0..net.parameter_count()).map(|i| i as f64).collect();
        net.set_params(&p).unwrap();
        assert_eq!(net.params(), p);
        assert_eq!(net.layers()[0].weights, array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]);
        assert_eq!(net.layers()[0].biases, array![6.0, 7.0, 8.0]);
    }

    #[test]
    fn glorot_bound_respected() {
        let net = DenseNetwork::new(&[10, 20], &[Activation::Relu], 9).unwrap();
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(net.layers()[0].weights.iter().all(|w| w.abs() <= bound));
    }
}
