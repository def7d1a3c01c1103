//! Fully connected Q-network: rectifier hidden layers, identity output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One affine layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.inputs + inp]
    }
}

/// MLP with a fixed (non-trained) affine input normalization
/// `x = (s - input_offset) * input_scale` in front of the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    input_offset: Vec<f64>,
    input_scale: Vec<f64>,
    layers: Vec<Dense>,
}

/// Per-layer gradients with the same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .flat_map(|g| g.iter())
            .fold(0.0_f64, |m, g| m.max(g.abs()))
    }
}

/// Activations retained by [`QNetwork::forward_batch`] for backpropagation.
/// `activations[0]` is the normalized input batch, `activations[k]` the output of layer `k-1`.
#[derive(Debug, Clone)]
pub struct BatchCache {
    pub batch: usize,
    pub activations: Vec<Vec<f64>>,
}

impl BatchCache {
    /// Output rows, `batch x n_actions`.
    pub fn output(&self) -> &[f64] {
        self.activations
            .last()
            .expect("cache holds the input at least")
    }
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n` given as strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl QNetwork {
    /// All-zero network with the given layer widths.
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        Self {
            input_offset: vec![0.0; dims[0]],
            input_scale: vec![1.0; dims[0]],
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(dims);
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        net
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Checkpoint("network has no layers".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::Checkpoint(format!(
                    "layer {k} has inconsistent shapes"
                )));
            }
            if k > 0 && layers[k - 1].outputs != l.inputs {
                return Err(Error::Checkpoint(format!(
                    "layer {k} expects {} inputs but layer {} emits {}",
                    l.inputs,
                    k - 1,
                    layers[k - 1].outputs
                )));
            }
        }
        let width = layers[0].inputs;
        let net = Self {
            input_offset: vec![0.0; width],
            input_scale: vec![1.0; width],
            layers,
        };
        if !net.is_finite() {
            return Err(Error::Checkpoint(
                "network parameters are not finite".into(),
            ));
        }
        Ok(net)
    }

    /// Replace the input normalization; both vectors must match the input width.
    pub fn with_input_normalization(mut self, offset: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if offset.len() != self.input_dim() || scale.len() != self.input_dim() {
            return Err(Error::Checkpoint(
                "input normalization width mismatch".into(),
            ));
        }
        if !offset.iter().chain(&scale).all(|v| v.is_finite()) {
            return Err(Error::Checkpoint(
                "input normalization is not finite".into(),
            ));
        }
        self.input_offset = offset;
        self.input_scale = scale;
        Ok(self)
    }

    pub fn input_offset(&self) -> &[f64] {
        &self.input_offset
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }

    fn normalize_into(&self, x: &[f64], out: &mut Vec<f64>) {
        let w = self.input_dim();
        out.clear();
        out.extend(x.iter().enumerate().map(|(k, v)| {
            let j = k % w;
            (v - self.input_offset[j]) * self.input_scale[j]
        }));
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|w| w.is_finite()) && l.biases.iter().all(|b| b.is_finite())
        })
    }

    /// Q-values of a single input.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "input width");
        let last = self.layers.len() - 1;
        let mut cur = Vec::with_capacity(x.len());
        self.normalize_into(x, &mut cur);
        for (k, layer) in self.layers.iter().enumerate() {
            let mut next = layer.biases.clone();
            for (o, out) in next.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                *out += row.iter().zip(&cur).map(|(w, x)| w * x).sum::<f64>();
                if k < last {
                    *out = out.max(0.0);
                }
            }
            cur = next;
        }
        cur
    }

    /// Forward pass over `batch` row-major inputs, keeping activations.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> BatchCache {
        assert_eq!(x.len(), batch * self.input_dim(), "batch input shape");
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut input = Vec::with_capacity(x.len());
        self.normalize_into(x, &mut input);
        activations.push(input);
        for (k, layer) in self.layers.iter().enumerate() {
            let input = activations.last().expect("nonempty");
            let mut z = vec![0.0; batch * layer.outputs];
            gemm(
                batch,
                layer.inputs,
                layer.outputs,
                input,
                (layer.inputs, 1),
                &layer.weights,
                (1, layer.inputs),
                &mut z,
            );
            for row in z.chunks_exact_mut(layer.outputs) {
                for (v, b) in row.iter_mut().zip(&layer.biases) {
                    *v += b;
                    if k < last {
                        *v = v.max(0.0);
                    }
                }
            }
            activations.push(z);
        }
        BatchCache { batch, activations }
    }

    /// Backpropagate `grad_out` (dLoss/dOutput, `batch x n_out`) through a cached pass.
    pub fn backward(&self, cache: &BatchCache, grad_out: &[f64]) -> Gradients {
        let batch = cache.batch;
        assert_eq!(grad_out.len(), batch * self.output_dim());
        let n = self.layers.len();
        let mut weights = vec![Vec::new(); n];
        let mut biases = vec![Vec::new(); n];
        let mut delta = grad_out.to_vec();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let input = &cache.activations[k];
            let mut dw = vec![0.0; layer.outputs * layer.inputs];
            gemm(
                layer.outputs,
                batch,
                layer.inputs,
                &delta,
                (1, layer.outputs),
                input,
                (layer.inputs, 1),
                &mut dw,
            );
            let mut db = vec![0.0; layer.outputs];
            for row in delta.chunks_exact(layer.outputs) {
                for (acc, d) in db.iter_mut().zip(row) {
                    *acc += d;
                }
            }
            if k > 0 {
                let mut prev = vec![0.0; batch * layer.inputs];
                gemm(
                    batch,
                    layer.outputs,
                    layer.inputs,
                    &delta,
                    (layer.outputs, 1),
                    &layer.weights,
                    (layer.inputs, 1),
                    &mut prev,
                );
                // rectifier derivative, read off the stored post-activation
                for (g, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = prev;
            }
            weights[k] = dw;
            biases[k] = db;
        }
        Gradients { weights, biases }
    }

    /// Bitwise copy of another network's parameters.
    pub fn copy_from(&mut self, other: &QNetwork) {
        self.clone_from(other);
    }
}

/// Update rule applied to the online network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam (or plain gradient descent) state for one network.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Gradients,
    v: Gradients,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, net: &QNetwork) -> Self {
        let zeros = Gradients {
            weights: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        };
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn apply(&mut self, net: &mut QNetwork, grads: &Gradients) {
        self.t += 1;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let t = self.t as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let tensors = [
                (
                    &mut layer.weights,
                    &grads.weights[k],
                    &mut self.m.weights[k],
                    &mut self.v.weights[k],
                ),
                (
                    &mut layer.biases,
                    &grads.biases[k],
                    &mut self.m.biases[k],
                    &mut self.v.biases[k],
                ),
            ];
            for (params, g, m, v) in tensors {
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (p, g) in params.iter_mut().zip(g) {
                            *p -= lr * g;
                        }
                    }
                    OptimizerKind::Adam => {
                        for (((p, g), m), v) in
                            params.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                        {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            let m_hat = *m / c1;
                            let v_hat = *v / c2;
                            *p -= lr * m_hat / (v_hat.sqrt() + eps);
                        }
                    }
                }
            }
        }
    }
}
