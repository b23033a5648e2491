//! Minimal neural-network engine: tensors, four layer kinds, backprop, five
//! optimizers, and a deterministic training loop.
//!
//! The networks this crate trains are tiny (a few hundred parameters) and
//! run once per received sample, so the engine optimizes for auditability
//! rather than throughput: plain `f64` tensors, explicit index arithmetic,
//! no SIMD, no autograd graph. Every layer's backward pass is written out by
//! hand and pinned by finite-difference tests.
//!
//! Layers compose front-to-back in a [`Network`]. Shapes follow the
//! conventions of the canceler architectures:
//!
//! * [`Conv2dLayer`] takes a rank-2 input (the delay-line I/Q graph) and
//!   produces feature-maps-last rank-3 output `[B, C, L]`.
//! * [`reshape_feature_maps`] flattens that to a `[B, C·L]` sequence with
//!   map-major interleaving (`new[b, l·C + c]`).
//! * [`RecurrentLayer`] consumes a `[T, n]` sequence and returns either the
//!   full state sequence or just the final state.
//! * [`DenseLayer`] maps a rank-1 vector through `act(W·u + b)`.
//!
//! # Example
//!
//! ```rust
//! use sic_core::nn_engine::{Activation, DenseLayer, Layer, Network, Tensor};
//! use rand::SeedableRng;
//! use rand_chacha::ChaCha20Rng;
//!
//! let mut rng = ChaCha20Rng::seed_from_u64(1);
//! let net = Network::new(vec![
//!     Layer::Dense(DenseLayer::glorot(4, 3, Activation::Tanh, &mut rng)),
//!     Layer::Dense(DenseLayer::glorot(3, 2, Activation::Linear, &mut rng)),
//! ]);
//! let y = net.forward(&Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.4]).unwrap()).unwrap();
//! assert_eq!(y.shape, vec![2]);
//! assert_eq!(net.num_params(), 4 * 3 + 3 + 3 * 2 + 2);
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, SicError};

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

/// Dense row-major tensor of `f64`, rank 1–3 in practice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    /// Dimension sizes, outermost first.
    pub shape: Vec<usize>,
    /// Elements in row-major order; length is the product of `shape`.
    pub data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Wraps existing data, checking the element count against the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(SicError::ShapeMismatch(format!(
                "{} elements for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    #[inline]
    fn at2_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.shape[1] + j]
    }

    #[inline]
    fn at3_mut(&mut self, i: usize, j: usize, k: usize) -> &mut f64 {
        let idx = (i * self.shape[1] + j) * self.shape[2] + k;
        &mut self.data[idx]
    }

    /// True when any element is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Pointwise nonlinearities the layers support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Identity; standard for output layers.
    Linear,
    /// `max(0, x)`; the derivative at exactly 0 is taken as 0.
    Relu,
    /// Logistic `1/(1+e^{-x})`.
    Sigmoid,
    /// Hyperbolic tangent.
    Tanh,
}

/// Evaluates an activation at a scalar.
pub fn activation_eval(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Linear => x,
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Tanh => x.tanh(),
    }
}

/// Derivative of an activation with respect to its pre-activation input.
/// `post` is the already-computed activation value, which lets the sigmoid
/// and tanh derivatives reuse it (`σ' = σ(1−σ)`, `tanh' = 1−tanh²`).
pub fn activation_deriv(kind: Activation, pre: f64, post: f64) -> f64 {
    match kind {
        Activation::Linear => 1.0,
        Activation::Relu => {
            if pre > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => post * (1.0 - post),
        Activation::Tanh => 1.0 - post * post,
    }
}

/// Draws one Glorot-uniform weight: `U(−√(6/(fan_in+fan_out)), +√(…))`.
fn glorot(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> f64 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.random_range(-limit..limit)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Fully connected layer `y = act(W·u + b)` on rank-1 inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// Weight matrix, shape `[n_out, n_in]`.
    pub weights: Tensor,
    /// Bias vector, shape `[n_out]`.
    pub bias: Tensor,
    /// Pointwise activation applied to the affine output.
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(n_in: usize, n_out: usize, activation: Activation, rng: &mut ChaCha20Rng) -> Self {
        let data = (0..n_out * n_in).map(|_| glorot(rng, n_in, n_out)).collect();
        Self {
            weights: Tensor::from_vec(&[n_out, n_in], data).expect("shape matches count"),
            bias: Tensor::zeros(&[n_out]),
            activation,
        }
    }

    /// Output width.
    pub fn n_out(&self) -> usize {
        self.weights.shape[0]
    }

    /// Input width.
    pub fn n_in(&self) -> usize {
        self.weights.shape[1]
    }
}

/// 2-D convolution over a single-channel rank-2 input, unity stride, no
/// padding, feature-maps-last output.
///
/// For input `[H, W]` and `L` kernels of shape `[R, S]`, the output is
/// `[B, C, L]` with `B = H−R+1`, `C = W−S+1` and
/// `out[b, c, l] = act(Σ_{r,s} K[l,r,s]·in[b+r, c+s] + bias[l])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2dLayer {
    /// Kernel stack, shape `[L, R, S]`.
    pub kernels: Tensor,
    /// One bias per feature map, shape `[L]`.
    pub bias: Tensor,
    /// Pointwise activation.
    pub activation: Activation,
}

impl Conv2dLayer {
    /// Glorot-uniform kernels, zero bias.
    pub fn glorot(
        maps: usize,
        rows: usize,
        cols: usize,
        activation: Activation,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = rows * cols; // single input channel
        let fan_out = maps * rows * cols;
        let data = (0..maps * rows * cols)
            .map(|_| glorot(rng, fan_in, fan_out))
            .collect();
        Self {
            kernels: Tensor::from_vec(&[maps, rows, cols], data).expect("shape matches count"),
            bias: Tensor::zeros(&[maps]),
            activation,
        }
    }

    /// Number of feature maps `L`.
    pub fn maps(&self) -> usize {
        self.kernels.shape[0]
    }

    /// Kernel height `R`.
    pub fn kernel_rows(&self) -> usize {
        self.kernels.shape[1]
    }

    /// Kernel width `S`.
    pub fn kernel_cols(&self) -> usize {
        self.kernels.shape[2]
    }
}

/// Simple (Elman) recurrent layer over a `[T, n_in]` sequence:
/// `h_t = act(W_in·u_t + W_rec·h_{t−1} + b)`, `h_{−1} = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentLayer {
    /// Input weights, shape `[n_hidden, n_in]`.
    pub w_in: Tensor,
    /// State-transition weights, shape `[n_hidden, n_hidden]`.
    pub w_rec: Tensor,
    /// Bias, shape `[n_hidden]`.
    pub bias: Tensor,
    /// Pointwise activation.
    pub activation: Activation,
    /// When true the layer outputs the whole `[T, n_hidden]` state sequence
    /// (needed under another recurrent layer); when false only the final
    /// state `[n_hidden]`.
    pub return_sequence: bool,
}

impl RecurrentLayer {
    /// Glorot-uniform input and state weights, zero bias.
    pub fn glorot(
        n_in: usize,
        n_hidden: usize,
        activation: Activation,
        return_sequence: bool,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let w_in = (0..n_hidden * n_in).map(|_| glorot(rng, n_in, n_hidden)).collect();
        let w_rec = (0..n_hidden * n_hidden)
            .map(|_| glorot(rng, n_hidden, n_hidden))
            .collect();
        Self {
            w_in: Tensor::from_vec(&[n_hidden, n_in], w_in).expect("shape matches count"),
            w_rec: Tensor::from_vec(&[n_hidden, n_hidden], w_rec).expect("shape matches count"),
            bias: Tensor::zeros(&[n_hidden]),
            activation,
            return_sequence,
        }
    }

    /// Hidden-state width.
    pub fn n_hidden(&self) -> usize {
        self.w_in.shape[0]
    }

    /// Per-step input width.
    pub fn n_in(&self) -> usize {
        self.w_in.shape[1]
    }
}

/// One stage of a [`Network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// Fully connected.
    Dense(DenseLayer),
    /// 2-D convolution.
    Conv2d(Conv2dLayer),
    /// Elman recurrence.
    Recurrent(RecurrentLayer),
    /// Parameter-free `[B, C, L] → [B, C·L]` flattening
    /// (see [`reshape_feature_maps`]).
    ReshapeMaps,
}

impl Layer {
    /// Number of trainable parameters in this layer.
    pub fn num_params(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weights.numel() + d.bias.numel(),
            Layer::Conv2d(c) => c.kernels.numel() + c.bias.numel(),
            Layer::Recurrent(r) => r.w_in.numel() + r.w_rec.numel() + r.bias.numel(),
            Layer::ReshapeMaps => 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Standalone forward routines
// ---------------------------------------------------------------------------

/// Runs a convolution layer on a rank-2 input; returns `(pre, post)`
/// activations, both shaped `[B, C, L]`.
pub fn conv2d_forward(layer: &Conv2dLayer, input: &Tensor) -> Result<(Tensor, Tensor)> {
    if input.shape.len() != 2 {
        return Err(SicError::ShapeMismatch(format!(
            "convolution expects a rank-2 input, got shape {:?}",
            input.shape
        )));
    }
    let (h, w) = (input.shape[0], input.shape[1]);
    let (l_maps, r, s) = (layer.maps(), layer.kernel_rows(), layer.kernel_cols());
    if r > h || s > w {
        return Err(SicError::ShapeMismatch(format!(
            "kernel {r}×{s} larger than input {h}×{w}"
        )));
    }
    let (b_rows, c_cols) = (h - r + 1, w - s + 1);
    let mut pre = Tensor::zeros(&[b_rows, c_cols, l_maps]);
    for b in 0..b_rows {
        for c in 0..c_cols {
            for l in 0..l_maps {
                let mut acc = layer.bias.data[l];
                for rr in 0..r {
                    for ss in 0..s {
                        acc += layer.kernels.at3(l, rr, ss) * input.at2(b + rr, c + ss);
                    }
                }
                *pre.at3_mut(b, c, l) = acc;
            }
        }
    }
    let post = Tensor {
        shape: pre.shape.clone(),
        data: pre
            .data
            .iter()
            .map(|&z| activation_eval(layer.activation, z))
            .collect(),
    };
    Ok((pre, post))
}

/// Flattens a feature-maps-last `[B, C, L]` tensor into the `[B, C·L]` row
/// sequence fed to the recurrent layer, interleaving maps fastest over
/// columns: `out[b, l·C + c] = in[b, c, l]`.
pub fn reshape_feature_maps(input: &Tensor) -> Result<Tensor> {
    if input.shape.len() != 3 {
        return Err(SicError::ShapeMismatch(format!(
            "feature-map reshape expects rank-3 input, got shape {:?}",
            input.shape
        )));
    }
    let (b_rows, c_cols, l_maps) = (input.shape[0], input.shape[1], input.shape[2]);
    let mut out = Tensor::zeros(&[b_rows, c_cols * l_maps]);
    for b in 0..b_rows {
        for c in 0..c_cols {
            for l in 0..l_maps {
                *out.at2_mut(b, l * c_cols + c) = input.at3(b, c, l);
            }
        }
    }
    Ok(out)
}

/// Runs a recurrent layer over a `[T, n_in]` sequence; returns the full
/// `(pre, post)` state sequences, both `[T, n_hidden]`, regardless of the
/// layer's `return_sequence` setting (the caller selects the final row when
/// only the last state is wanted).
pub fn recurrent_forward(layer: &RecurrentLayer, input: &Tensor) -> Result<(Tensor, Tensor)> {
    if input.shape.len() != 2 || input.shape[1] != layer.n_in() {
        return Err(SicError::ShapeMismatch(format!(
            "recurrent layer expects [T, {}] input, got shape {:?}",
            layer.n_in(),
            input.shape
        )));
    }
    let (t_steps, n_in, n_h) = (input.shape[0], layer.n_in(), layer.n_hidden());
    let mut pre = Tensor::zeros(&[t_steps, n_h]);
    let mut post = Tensor::zeros(&[t_steps, n_h]);
    for t in 0..t_steps {
        for i in 0..n_h {
            let mut acc = layer.bias.data[i];
            for j in 0..n_in {
                acc += layer.w_in.at2(i, j) * input.at2(t, j);
            }
            if t > 0 {
                for j in 0..n_h {
                    acc += layer.w_rec.at2(i, j) * post.at2(t - 1, j);
                }
            }
            *pre.at2_mut(t, i) = acc;
        }
        for i in 0..n_h {
            let z = pre.at2(t, i);
            *post.at2_mut(t, i) = activation_eval(layer.activation, z);
        }
    }
    Ok((pre, post))
}

fn dense_forward(layer: &DenseLayer, input: &Tensor) -> Result<(Tensor, Tensor)> {
    if input.shape.len() != 1 || input.shape[0] != layer.n_in() {
        return Err(SicError::ShapeMismatch(format!(
            "dense layer expects [{}] input, got shape {:?}",
            layer.n_in(),
            input.shape
        )));
    }
    let (n_out, n_in) = (layer.n_out(), layer.n_in());
    let mut pre = Tensor::zeros(&[n_out]);
    for i in 0..n_out {
        let mut acc = layer.bias.data[i];
        for j in 0..n_in {
            acc += layer.weights.at2(i, j) * input.data[j];
        }
        pre.data[i] = acc;
    }
    let post = Tensor {
        shape: pre.shape.clone(),
        data: pre
            .data
            .iter()
            .map(|&z| activation_eval(layer.activation, z))
            .collect(),
    };
    Ok((pre, post))
}

// ---------------------------------------------------------------------------
// Network: forward, backward, parameter plumbing
// ---------------------------------------------------------------------------

/// Per-layer records kept by a traced forward pass, consumed by
/// [`Network::backward`].
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// The tensor the layer received.
    pub input: Tensor,
    /// Pre-activation values (recurrent: the full `[T, n_h]` sequence).
    pub pre: Tensor,
    /// Post-activation values (recurrent: the full sequence; the final-state
    /// selection happens outside the trace).
    pub post: Tensor,
}

/// A feed-forward composition of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// Stages, applied first to last.
    pub layers: Vec<Layer>,
}

impl Network {
    /// Wraps a layer stack.
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Total trainable parameter count.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Runs the network on one input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (out, _) = self.forward_traced(input)?;
        Ok(out)
    }

    /// Runs the network, recording everything the backward pass needs.
    pub fn forward_traced(&self, input: &Tensor) -> Result<(Tensor, Vec<LayerTrace>)> {
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for layer in &self.layers {
            let (pre, post, output) = match layer {
                Layer::Dense(d) => {
                    let (pre, post) = dense_forward(d, &current)?;
                    let out = post.clone();
                    (pre, post, out)
                }
                Layer::Conv2d(c) => {
                    let (pre, post) = conv2d_forward(c, &current)?;
                    let out = post.clone();
                    (pre, post, out)
                }
                Layer::Recurrent(r) => {
                    let (pre, post) = recurrent_forward(r, &current)?;
                    let out = if r.return_sequence {
                        post.clone()
                    } else {
                        let n_h = r.n_hidden();
                        let t = post.shape[0];
                        Tensor::from_vec(&[n_h], post.data[(t - 1) * n_h..].to_vec())?
                    };
                    (pre, post, out)
                }
                Layer::ReshapeMaps => {
                    let out = reshape_feature_maps(&current)?;
                    (out.clone(), out.clone(), out)
                }
            };
            traces.push(LayerTrace {
                input: current,
                pre,
                post,
            });
            current = output;
        }
        Ok((current, traces))
    }

    /// Backpropagates a loss gradient through the network.
    ///
    /// # Arguments
    /// * `traces` - the records from [`forward_traced`](Self::forward_traced)
    ///   on the same input.
    /// * `grad_output` - `∂E/∂output`, shaped like the network output.
    ///
    /// # Returns
    /// The gradient with respect to the network input, and the flat parameter
    /// gradient aligned element-for-element with
    /// [`flatten_params`](Self::flatten_params).
    pub fn backward(&self, traces: &[LayerTrace], grad_output: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if traces.len() != self.layers.len() {
            return Err(SicError::ShapeMismatch(format!(
                "{} traces for {} layers",
                traces.len(),
                self.layers.len()
            )));
        }
        // Parameter-gradient blocks, one per layer, filled back-to-front.
        let mut param_grads: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|l| vec![0.0; l.num_params()])
            .collect();

        let mut grad = grad_output.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let trace = &traces[idx];
            grad = match layer {
                Layer::Dense(d) => dense_backward(d, trace, &grad, &mut param_grads[idx])?,
                Layer::Conv2d(c) => conv2d_backward(c, trace, &grad, &mut param_grads[idx])?,
                Layer::Recurrent(r) => recurrent_backward(r, trace, &grad, &mut param_grads[idx])?,
                Layer::ReshapeMaps => reshape_backward(trace, &grad)?,
            };
        }
        Ok((grad, param_grads.concat()))
    }

    /// Copies all parameters into one flat vector: layers in order, and
    /// within each layer weights before bias (recurrent: input weights,
    /// state weights, bias).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.extend_from_slice(&d.weights.data);
                    out.extend_from_slice(&d.bias.data);
                }
                Layer::Conv2d(c) => {
                    out.extend_from_slice(&c.kernels.data);
                    out.extend_from_slice(&c.bias.data);
                }
                Layer::Recurrent(r) => {
                    out.extend_from_slice(&r.w_in.data);
                    out.extend_from_slice(&r.w_rec.data);
                    out.extend_from_slice(&r.bias.data);
                }
                Layer::ReshapeMaps => {}
            }
        }
        out
    }

    /// Writes a flat vector (same layout as
    /// [`flatten_params`](Self::flatten_params)) back into the layers.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(SicError::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        let mut take = |dst: &mut Tensor| {
            let n = dst.data.len();
            dst.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    take(&mut d.weights);
                    take(&mut d.bias);
                }
                Layer::Conv2d(c) => {
                    take(&mut c.kernels);
                    take(&mut c.bias);
                }
                Layer::Recurrent(r) => {
                    take(&mut r.w_in);
                    take(&mut r.w_rec);
                    take(&mut r.bias);
                }
                Layer::ReshapeMaps => {}
            }
        }
        Ok(())
    }
}

fn dense_backward(
    layer: &DenseLayer,
    trace: &LayerTrace,
    grad_out: &Tensor,
    pgrad: &mut [f64],
) -> Result<Tensor> {
    let (n_out, n_in) = (layer.n_out(), layer.n_in());
    if grad_out.shape != [n_out] {
        return Err(SicError::ShapeMismatch(format!(
            "dense backward got gradient shape {:?}, expected [{n_out}]",
            grad_out.shape
        )));
    }
    let (w_grad, b_grad) = pgrad.split_at_mut(n_out * n_in);
    let mut grad_in = Tensor::zeros(&[n_in]);
    for i in 0..n_out {
        let dz = grad_out.data[i]
            * activation_deriv(layer.activation, trace.pre.data[i], trace.post.data[i]);
        b_grad[i] += dz;
        for j in 0..n_in {
            w_grad[i * n_in + j] += dz * trace.input.data[j];
            grad_in.data[j] += layer.weights.at2(i, j) * dz;
        }
    }
    Ok(grad_in)
}

fn conv2d_backward(
    layer: &Conv2dLayer,
    trace: &LayerTrace,
    grad_out: &Tensor,
    pgrad: &mut [f64],
) -> Result<Tensor> {
    let (l_maps, r, s) = (layer.maps(), layer.kernel_rows(), layer.kernel_cols());
    let (b_rows, c_cols) = (trace.pre.shape[0], trace.pre.shape[1]);
    if grad_out.shape != trace.pre.shape {
        return Err(SicError::ShapeMismatch(format!(
            "conv backward got gradient shape {:?}, expected {:?}",
            grad_out.shape, trace.pre.shape
        )));
    }
    let (k_grad, b_grad) = pgrad.split_at_mut(l_maps * r * s);
    let mut grad_in = Tensor::zeros(&[trace.input.shape[0], trace.input.shape[1]]);
    for b in 0..b_rows {
        for c in 0..c_cols {
            for l in 0..l_maps {
                let dz = grad_out.at3(b, c, l)
                    * activation_deriv(layer.activation, trace.pre.at3(b, c, l), trace.post.at3(b, c, l));
                b_grad[l] += dz;
                for rr in 0..r {
                    for ss in 0..s {
                        k_grad[(l * r + rr) * s + ss] += dz * trace.input.at2(b + rr, c + ss);
                        *grad_in.at2_mut(b + rr, c + ss) += dz * layer.kernels.at3(l, rr, ss);
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

fn recurrent_backward(
    layer: &RecurrentLayer,
    trace: &LayerTrace,
    grad_out: &Tensor,
    pgrad: &mut [f64],
) -> Result<Tensor> {
    let (n_h, n_in) = (layer.n_hidden(), layer.n_in());
    let t_steps = trace.pre.shape[0];

    // External gradient per step: either the whole sequence or only the
    // final state, depending on what the layer exposed downstream.
    let seq_grad: Tensor = if layer.return_sequence {
        if grad_out.shape != [t_steps, n_h] {
            return Err(SicError::ShapeMismatch(format!(
                "recurrent backward got gradient shape {:?}, expected [{t_steps}, {n_h}]",
                grad_out.shape
            )));
        }
        grad_out.clone()
    } else {
        if grad_out.shape != [n_h] {
            return Err(SicError::ShapeMismatch(format!(
                "recurrent backward got gradient shape {:?}, expected [{n_h}]",
                grad_out.shape
            )));
        }
        let mut g = Tensor::zeros(&[t_steps, n_h]);
        g.data[(t_steps - 1) * n_h..].copy_from_slice(&grad_out.data);
        g
    };

    let w_in_len = n_h * n_in;
    let w_rec_len = n_h * n_h;
    let (w_in_grad, rest) = pgrad.split_at_mut(w_in_len);
    let (w_rec_grad, b_grad) = rest.split_at_mut(w_rec_len);

    let mut grad_in = Tensor::zeros(&[t_steps, n_in]);
    // Gradient flowing into h_t from steps after t.
    let mut carry = vec![0.0; n_h];
    for t in (0..t_steps).rev() {
        let mut dz = vec![0.0; n_h];
        for i in 0..n_h {
            let total = seq_grad.at2(t, i) + carry[i];
            dz[i] = total * activation_deriv(layer.activation, trace.pre.at2(t, i), trace.post.at2(t, i));
            b_grad[i] += dz[i];
            for j in 0..n_in {
                w_in_grad[i * n_in + j] += dz[i] * trace.input.at2(t, j);
                *grad_in.at2_mut(t, j) += layer.w_in.at2(i, j) * dz[i];
            }
            if t > 0 {
                for j in 0..n_h {
                    w_rec_grad[i * n_h + j] += dz[i] * trace.post.at2(t - 1, j);
                }
            }
        }
        // Propagate into h_{t−1} through the state weights.
        if t > 0 {
            for j in 0..n_h {
                let mut acc = 0.0;
                for i in 0..n_h {
                    acc += layer.w_rec.at2(i, j) * dz[i];
                }
                carry[j] = acc;
            }
        }
    }
    Ok(grad_in)
}

fn reshape_backward(trace: &LayerTrace, grad_out: &Tensor) -> Result<Tensor> {
    let (b_rows, c_cols, l_maps) = (
        trace.input.shape[0],
        trace.input.shape[1],
        trace.input.shape[2],
    );
    if grad_out.shape != [b_rows, c_cols * l_maps] {
        return Err(SicError::ShapeMismatch(format!(
            "reshape backward got gradient shape {:?}, expected [{b_rows}, {}]",
            grad_out.shape,
            c_cols * l_maps
        )));
    }
    let mut grad_in = Tensor::zeros(&[b_rows, c_cols, l_maps]);
    for b in 0..b_rows {
        for c in 0..c_cols {
            for l in 0..l_maps {
                *grad_in.at3_mut(b, c, l) = grad_out.at2(b, l * c_cols + c);
            }
        }
    }
    Ok(grad_in)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean squared error over stacked I/Q predictions:
/// `E = (1/2N)·Σ_n (I_n−Î_n)² + (Q_n−Q̂_n)²` for `[N, 2]` tensors (a single
/// `[2]` pair is treated as `N = 1`).
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(SicError::ShapeMismatch(format!(
            "prediction shape {:?} vs target shape {:?}",
            pred.shape, target.shape
        )));
    }
    let n = match pred.shape.as_slice() {
        [2] => 1,
        [n, 2] => *n,
        other => {
            return Err(SicError::ShapeMismatch(format!(
                "loss expects [N, 2] or [2] shapes, got {other:?}"
            )))
        }
    };
    let sum: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / (2.0 * n as f64))
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// First-order update rules available to [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e−8) with bias correction.
    Adam,
    /// RMSprop (ρ = 0.9, ε = 1e−8).
    RmsProp,
    /// AdaDelta (ρ = 0.95, ε = 1e−6); the learning rate acts as a plain
    /// multiplier on the self-scaled update, customarily 1.0.
    AdaDelta,
    /// Adamax (β₁ = 0.9, β₂ = 0.999, ε = 1e−8), the infinity-norm Adam.
    Adamax,
}

impl OptimizerKind {
    /// Parses the lowercase names used by config files and the CLI.
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            "rmsprop" => Ok(Self::RmsProp),
            "adadelta" => Ok(Self::AdaDelta),
            "adamax" => Ok(Self::Adamax),
            other => Err(SicError::UnknownName(format!("optimizer {other:?}"))),
        }
    }
}

/// Per-parameter accumulator state for one optimizer instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Which update rule the state belongs to.
    pub kind: OptimizerKind,
    /// First-moment / squared-gradient accumulator (meaning depends on kind).
    slot_a: Vec<f64>,
    /// Second accumulator (second moment, infinity norm, or update history).
    slot_b: Vec<f64>,
    /// Step counter for bias correction.
    t: u64,
}

impl OptimizerState {
    /// Fresh state for `n_params` parameters.
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        Self {
            kind,
            slot_a: vec![0.0; n_params],
            slot_b: vec![0.0; n_params],
            t: 0,
        }
    }
}

/// Applies one optimizer update in place.
///
/// # Arguments
/// * `state` - accumulator state; must match `params` in length.
/// * `params` - flat parameter vector, updated in place.
/// * `grads` - loss gradient for each parameter.
/// * `lr` - learning rate (for AdaDelta, a multiplier on the self-scaled step).
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.slot_a.len() {
        return Err(SicError::ShapeMismatch(format!(
            "{} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.slot_a.len()
        )));
    }
    state.t += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, &g) in params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            let bc1 = 1.0 - B1.powi(state.t as i32);
            let bc2 = 1.0 - B2.powi(state.t as i32);
            for i in 0..params.len() {
                let g = grads[i];
                state.slot_a[i] = B1 * state.slot_a[i] + (1.0 - B1) * g;
                state.slot_b[i] = B2 * state.slot_b[i] + (1.0 - B2) * g * g;
                let m_hat = state.slot_a[i] / bc1;
                let v_hat = state.slot_b[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        OptimizerKind::RmsProp => {
            const RHO: f64 = 0.9;
            const EPS: f64 = 1e-8;
            for i in 0..params.len() {
                let g = grads[i];
                state.slot_a[i] = RHO * state.slot_a[i] + (1.0 - RHO) * g * g;
                params[i] -= lr * g / (state.slot_a[i].sqrt() + EPS);
            }
        }
        OptimizerKind::AdaDelta => {
            const RHO: f64 = 0.95;
            const EPS: f64 = 1e-6;
            for i in 0..params.len() {
                let g = grads[i];
                state.slot_a[i] = RHO * state.slot_a[i] + (1.0 - RHO) * g * g;
                let step = -((state.slot_b[i] + EPS).sqrt() / (state.slot_a[i] + EPS).sqrt()) * g;
                state.slot_b[i] = RHO * state.slot_b[i] + (1.0 - RHO) * step * step;
                params[i] += lr * step;
            }
        }
        OptimizerKind::Adamax => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            let bc1 = 1.0 - B1.powi(state.t as i32);
            for i in 0..params.len() {
                let g = grads[i];
                state.slot_a[i] = B1 * state.slot_a[i] + (1.0 - B1) * g;
                state.slot_b[i] = (B2 * state.slot_b[i]).max(g.abs());
                params[i] -= (lr / bc1) * state.slot_a[i] / (state.slot_b[i] + EPS);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// A supervised regression set: one input tensor and one I/Q target pair per
/// sample.
#[derive(Debug, Clone)]
pub struct TrainData {
    /// Per-sample network inputs.
    pub inputs: Vec<Tensor>,
    /// Per-sample `[I, Q]` regression targets.
    pub targets: Vec<[f64; 2]>,
}

impl TrainData {
    /// Validates matching lengths and non-emptiness.
    pub fn new(inputs: Vec<Tensor>, targets: Vec<[f64; 2]>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(SicError::InvalidConfig("training set is empty".into()));
        }
        if inputs.len() != targets.len() {
            return Err(SicError::LengthMismatch {
                context: "inputs and targets".into(),
                left: inputs.len(),
                right: targets.len(),
            });
        }
        Ok(Self { inputs, targets })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    /// True when the set holds no samples (constructed sets never are).
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Hyperparameters for [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    /// Number of passes over the training set.
    pub epochs: usize,
    /// Mini-batch size (a trailing partial batch is kept).
    pub batch_size: usize,
    /// Learning rate handed to the optimizer each step.
    pub learning_rate: f64,
    /// Update rule.
    pub optimizer: OptimizerKind,
    /// Seed for the per-epoch sample shuffle. Training is a pure function of
    /// (network, data, settings).
    pub shuffle_seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 5e-3,
            optimizer: OptimizerKind::Adam,
            shuffle_seed: 0,
        }
    }
}

/// Loss snapshot taken at the end of each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Epoch index, starting at 0.
    pub epoch: usize,
    /// Full-pass MSE on the training set after the epoch's updates.
    pub train_mse: f64,
    /// Full-pass MSE on the held-out set.
    pub test_mse: f64,
}

/// What [`train`] returns: the best network seen and the loss history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest test MSE (not necessarily
    /// the last).
    pub network: Network,
    /// One entry per epoch, in order; always `epochs` long on success.
    pub history: Vec<EpochStats>,
    /// Index into `history` of the retained parameters.
    pub best_epoch: usize,
}

/// Full-pass MSE of a network over a dataset.
pub fn dataset_mse(network: &Network, data: &TrainData) -> Result<f64> {
    let mut acc = 0.0;
    for (input, target) in data.inputs.iter().zip(&data.targets) {
        let out = network.forward(input)?;
        if out.shape != [2] {
            return Err(SicError::ShapeMismatch(format!(
                "canceler networks must emit [2] (I, Q), got {:?}",
                out.shape
            )));
        }
        let di = out.data[0] - target[0];
        let dq = out.data[1] - target[1];
        acc += di * di + dq * dq;
    }
    Ok(acc / (2.0 * data.len() as f64))
}

/// Trains a network by mini-batch gradient descent.
///
/// Each epoch shuffles the sample order (Fisher–Yates, ChaCha20 from
/// `shuffle_seed`), walks contiguous batches (keeping the trailing partial
/// one), averages per-sample gradients over each batch, and applies one
/// optimizer step. After every epoch the full-pass train and test MSE are
/// recorded; the parameters with the best test MSE are the one returned.
///
/// # Errors
/// [`SicError::Diverged`] as soon as a loss or parameter turns NaN/infinite;
/// the offending epoch is reported.
pub fn train(
    network: Network,
    train_data: &TrainData,
    test_data: &TrainData,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    if settings.epochs == 0 {
        return Err(SicError::InvalidConfig("epochs must be at least 1".into()));
    }
    if settings.batch_size == 0 {
        return Err(SicError::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut net = network;
    let mut params = net.flatten_params();
    let mut opt = OptimizerState::new(settings.optimizer, params.len());
    let mut rng = ChaCha20Rng::seed_from_u64(settings.shuffle_seed);

    let mut history = Vec::with_capacity(settings.epochs);
    let mut best_epoch = 0usize;
    let mut best_mse = f64::INFINITY;
    let mut best_params = params.clone();

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(settings.batch_size) {
            let mut grad_sum = vec![0.0; params.len()];
            for &sample in batch {
                let (out, traces) = net.forward_traced(&train_data.inputs[sample])?;
                if out.shape != [2] {
                    return Err(SicError::ShapeMismatch(format!(
                        "canceler networks must emit [2] (I, Q), got {:?}",
                        out.shape
                    )));
                }
                let target = train_data.targets[sample];
                // ∂/∂pred of (1/2B)Σ‖pred−target‖² is (pred−target)/B; the
                // 1/B division is applied once after accumulation.
                let grad_out = Tensor::from_vec(
                    &[2],
                    vec![out.data[0] - target[0], out.data[1] - target[1]],
                )?;
                let (_, pgrads) = net.backward(&traces, &grad_out)?;
                for (acc, g) in grad_sum.iter_mut().zip(&pgrads) {
                    *acc += g;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad_sum.iter_mut() {
                *g *= inv;
            }
            optimizer_step(&mut opt, &mut params, &grad_sum, settings.learning_rate)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(SicError::Diverged { epoch });
            }
            net.set_params(&params)?;
        }

        let train_mse = dataset_mse(&net, train_data)?;
        let test_mse = dataset_mse(&net, test_data)?;
        if !train_mse.is_finite() || !test_mse.is_finite() {
            return Err(SicError::Diverged { epoch });
        }
        history.push(EpochStats {
            epoch,
            train_mse,
            test_mse,
        });
        if test_mse < best_mse {
            best_mse = test_mse;
            best_epoch = epoch;
            best_params.copy_from_slice(&params);
        }
    }

    net.set_params(&best_params)?;
    Ok(TrainOutcome {
        network: net,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn activation_values_and_derivatives() {
        assert_eq!(activation_eval(Activation::Relu, -1.5), 0.0);
        assert_eq!(activation_eval(Activation::Relu, 2.5), 2.5);
        assert_eq!(activation_eval(Activation::Sigmoid, 0.0), 0.5);
        assert_eq!(activation_eval(Activation::Tanh, 0.0), 0.0);
        assert_eq!(activation_eval(Activation::Linear, 3.25), 3.25);

        // Derivatives against central finite differences.
        for kind in [Activation::Sigmoid, Activation::Tanh, Activation::Linear] {
            for &x in &[-2.0, -0.3, 0.7, 1.9] {
                let h = 1e-6;
                let numeric =
                    (activation_eval(kind, x + h) - activation_eval(kind, x - h)) / (2.0 * h);
                let post = activation_eval(kind, x);
                let analytic = activation_deriv(kind, x, post);
                assert!(
                    (numeric - analytic).abs() < 1e-8,
                    "{kind:?} at {x}: {numeric} vs {analytic}"
                );
            }
        }
        // ReLU away from the kink, plus the documented choice at 0.
        assert_eq!(activation_deriv(Activation::Relu, 1.0, 1.0), 1.0);
        assert_eq!(activation_deriv(Activation::Relu, -1.0, 0.0), 0.0);
        assert_eq!(activation_deriv(Activation::Relu, 0.0, 0.0), 0.0);
    }

    #[test]
    fn conv_forward_hand_computed() {
        // Input 3×2, one 2×1 kernel [1, −1]ᵀ, bias 0.5, linear activation.
        let layer = Conv2dLayer {
            kernels: Tensor::from_vec(&[1, 2, 1], vec![1.0, -1.0]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![0.5]).unwrap(),
            activation: Activation::Linear,
        };
        let input = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (_, out) = conv2d_forward(&layer, &input).unwrap();
        assert_eq!(out.shape, vec![2, 2, 1]);
        // out[b,c,0] = in[b,c] − in[b+1,c] + 0.5 = −1.5 everywhere here.
        assert_eq!(out.data, vec![-1.5, -1.5, -1.5, -1.5]);
    }

    #[test]
    fn conv_output_shape_follows_valid_padding() {
        let mut r = rng(2);
        // 13×2 input graph, 12×1 kernels, 3 maps → [2, 2, 3].
        let layer = Conv2dLayer::glorot(3, 12, 1, Activation::Relu, &mut r);
        let input = Tensor::zeros(&[13, 2]);
        let (_, out) = conv2d_forward(&layer, &input).unwrap();
        assert_eq!(out.shape, vec![2, 2, 3]);
        // Oversized kernel is a shape error.
        let big = Conv2dLayer::glorot(1, 14, 1, Activation::Relu, &mut r);
        assert!(conv2d_forward(&big, &input).is_err());
    }

    #[test]
    fn reshape_interleaves_maps_fastest_over_columns() {
        // [B=2, C=2, L=3] with value 100b + 10c + l for easy auditing.
        let mut t = Tensor::zeros(&[2, 2, 3]);
        for b in 0..2 {
            for c in 0..2 {
                for l in 0..3 {
                    *t.at3_mut(b, c, l) = (100 * b + 10 * c + l) as f64;
                }
            }
        }
        let r = reshape_feature_maps(&t).unwrap();
        assert_eq!(r.shape, vec![2, 6]);
        // Row b, slot l·C + c.
        assert_eq!(
            r.data,
            vec![
                0.0, 10.0, 1.0, 11.0, 2.0, 12.0, // b = 0
                100.0, 110.0, 101.0, 111.0, 102.0, 112.0, // b = 1
            ]
        );
    }

    #[test]
    fn recurrence_hand_computed() {
        // Scalar state, linear activation: h_t = 2·u_t + 0.5·h_{t−1} + 1.
        let layer = RecurrentLayer {
            w_in: Tensor::from_vec(&[1, 1], vec![2.0]).unwrap(),
            w_rec: Tensor::from_vec(&[1, 1], vec![0.5]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![1.0]).unwrap(),
            activation: Activation::Linear,
            return_sequence: true,
        };
        let input = Tensor::from_vec(&[3, 1], vec![1.0, 0.0, -1.0]).unwrap();
        let (_, h) = recurrent_forward(&layer, &input).unwrap();
        // h0 = 3; h1 = 0 + 1.5 + 1 = 2.5; h2 = −2 + 1.25 + 1 = 0.25.
        assert_eq!(h.data, vec![3.0, 2.5, 0.25]);
    }

    #[test]
    fn mse_hand_computed() {
        let pred = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let target = Tensor::zeros(&[2, 2]);
        // (1 + 4 + 9 + 16) / (2·2) = 7.5
        assert_eq!(mse_loss(&pred, &target).unwrap(), 7.5);
        let single = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(mse_loss(&single, &Tensor::zeros(&[2])).unwrap(), 12.5);
        assert!(mse_loss(&pred, &single).is_err());
    }

    /// Central finite-difference gradient of the scalar loss
    /// `E = mse(net(x), target)` with respect to every parameter.
    fn numeric_param_grads(net: &Network, input: &Tensor, target: &Tensor) -> Vec<f64> {
        let mut probe = net.clone();
        let base = net.flatten_params();
        let mut grads = vec![0.0; base.len()];
        for i in 0..base.len() {
            let h = 1e-6 * base[i].abs().max(1.0);
            let mut plus = base.clone();
            plus[i] += h;
            probe.set_params(&plus).unwrap();
            let loss_p = mse_loss(&probe.forward(input).unwrap(), target).unwrap();
            let mut minus = base.clone();
            minus[i] -= h;
            probe.set_params(&minus).unwrap();
            let loss_m = mse_loss(&probe.forward(input).unwrap(), target).unwrap();
            grads[i] = (loss_p - loss_m) / (2.0 * h);
        }
        grads
    }

    fn assert_grads_match(analytic: &[f64], numeric: &[f64], tag: &str) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let tol = 1e-6 * a.abs().max(n.abs()).max(1.0) + 1e-9;
            assert!(
                (a - n).abs() < tol,
                "{tag}: param {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn backprop_matches_finite_differences_on_hybrid_stack() {
        // conv → reshape → recurrent(final) → dense, all smooth activations
        // so the finite-difference probe is kink-free.
        let mut r = rng(77);
        let net = Network::new(vec![
            Layer::Conv2d(Conv2dLayer::glorot(3, 4, 1, Activation::Tanh, &mut r)),
            Layer::ReshapeMaps,
            Layer::Recurrent(RecurrentLayer::glorot(6, 5, Activation::Tanh, false, &mut r)),
            Layer::Dense(DenseLayer::glorot(5, 2, Activation::Linear, &mut r)),
        ]);
        let input = Tensor::from_vec(
            &[6, 2],
            (0..12).map(|i| ((i as f64) * 0.37).sin()).collect(),
        )
        .unwrap();
        let target = Tensor::from_vec(&[2], vec![0.3, -0.4]).unwrap();

        let (out, traces) = net.forward_traced(&input).unwrap();
        let grad_out = Tensor::from_vec(
            &[2],
            vec![out.data[0] - target.data[0], out.data[1] - target.data[1]],
        )
        .unwrap();
        let (_, analytic) = net.backward(&traces, &grad_out).unwrap();
        let numeric = numeric_param_grads(&net, &input, &target);
        assert_grads_match(&analytic, &numeric, "hybrid stack");
    }

    #[test]
    fn backprop_matches_finite_differences_through_stacked_recurrence() {
        // Sequence-returning recurrent feeding another recurrent layer, then
        // a sigmoid dense sandwich: exercises the return_sequence path.
        let mut r = rng(101);
        let net = Network::new(vec![
            Layer::Recurrent(RecurrentLayer::glorot(2, 4, Activation::Tanh, true, &mut r)),
            Layer::Recurrent(RecurrentLayer::glorot(4, 3, Activation::Sigmoid, false, &mut r)),
            Layer::Dense(DenseLayer::glorot(3, 2, Activation::Linear, &mut r)),
        ]);
        let input = Tensor::from_vec(
            &[5, 2],
            (0..10).map(|i| ((i as f64) * 0.71).cos()).collect(),
        )
        .unwrap();
        let target = Tensor::from_vec(&[2], vec![-0.2, 0.6]).unwrap();

        let (out, traces) = net.forward_traced(&input).unwrap();
        let grad_out = Tensor::from_vec(
            &[2],
            vec![out.data[0] - target.data[0], out.data[1] - target.data[1]],
        )
        .unwrap();
        let (_, analytic) = net.backward(&traces, &grad_out).unwrap();
        let numeric = numeric_param_grads(&net, &input, &target);
        assert_grads_match(&analytic, &numeric, "stacked recurrence");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng(55);
        let net = Network::new(vec![
            Layer::Dense(DenseLayer::glorot(3, 4, Activation::Tanh, &mut r)),
            Layer::Dense(DenseLayer::glorot(4, 2, Activation::Linear, &mut r)),
        ]);
        let input = Tensor::from_vec(&[3], vec![0.2, -0.5, 0.9]).unwrap();
        let target = Tensor::from_vec(&[2], vec![0.1, 0.1]).unwrap();

        let (out, traces) = net.forward_traced(&input).unwrap();
        let grad_out = Tensor::from_vec(
            &[2],
            vec![out.data[0] - target.data[0], out.data[1] - target.data[1]],
        )
        .unwrap();
        let (grad_in, _) = net.backward(&traces, &grad_out).unwrap();

        for i in 0..3 {
            let h = 1e-6;
            let mut plus = input.clone();
            plus.data[i] += h;
            let lp = mse_loss(&net.forward(&plus).unwrap(), &target).unwrap();
            let mut minus = input.clone();
            minus.data[i] -= h;
            let lm = mse_loss(&net.forward(&minus).unwrap(), &target).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (grad_in.data[i] - numeric).abs() < 1e-7,
                "input {i}: {} vs {numeric}",
                grad_in.data[i]
            );
        }
    }

    #[test]
    fn parameter_flattening_round_trips() {
        let mut r = rng(9);
        let mut net = Network::new(vec![
            Layer::Conv2d(Conv2dLayer::glorot(2, 3, 2, Activation::Relu, &mut r)),
            Layer::ReshapeMaps,
            Layer::Recurrent(RecurrentLayer::glorot(2, 4, Activation::Relu, false, &mut r)),
            Layer::Dense(DenseLayer::glorot(4, 2, Activation::Linear, &mut r)),
        ]);
        // Literal count: conv 2·(3·2)+2 = 14; recurrent 4·2+16+4 = 28;
        // dense 2·4+2 = 10.
        assert_eq!(net.num_params(), 14 + 28 + 10);
        let flat = net.flatten_params();
        assert_eq!(flat.len(), net.num_params());
        let mut changed = flat.clone();
        for (i, v) in changed.iter_mut().enumerate() {
            *v = i as f64 * 0.01;
        }
        net.set_params(&changed).unwrap();
        assert_eq!(net.flatten_params(), changed);
        assert!(net.set_params(&changed[1..]).is_err());
    }

    #[test]
    fn optimizer_single_steps_match_update_equations() {
        let grads = [1.0, -2.0];
        let lr = 0.1;

        let mut p = [0.0, 0.0];
        let mut st = OptimizerState::new(OptimizerKind::Sgd, 2);
        optimizer_step(&mut st, &mut p, &grads, lr).unwrap();
        assert_eq!(p, [-0.1, 0.2]);

        // Adam, t = 1: m̂ = g, v̂ = g² → step = −lr·g/(|g| + ε).
        let mut p = [0.0, 0.0];
        let mut st = OptimizerState::new(OptimizerKind::Adam, 2);
        optimizer_step(&mut st, &mut p, &grads, lr).unwrap();
        for i in 0..2 {
            let expect = -lr * grads[i] / (grads[i].abs() + 1e-8);
            assert!((p[i] - expect).abs() < 1e-15);
        }

        // RMSprop, t = 1: v = 0.1·g² → step = −lr·g/(√v + ε).
        let mut p = [0.0, 0.0];
        let mut st = OptimizerState::new(OptimizerKind::RmsProp, 2);
        optimizer_step(&mut st, &mut p, &grads, lr).unwrap();
        for i in 0..2 {
            let v = 0.1 * grads[i] * grads[i];
            let expect = -lr * grads[i] / (v.sqrt() + 1e-8);
            assert!((p[i] - expect).abs() < 1e-15);
        }

        // AdaDelta, t = 1 with lr treated as a multiplier of 1.
        let mut p = [0.0, 0.0];
        let mut st = OptimizerState::new(OptimizerKind::AdaDelta, 2);
        optimizer_step(&mut st, &mut p, &grads, 1.0).unwrap();
        for i in 0..2 {
            let acc_g = 0.05 * grads[i] * grads[i];
            let expect = -((0.0f64 + 1e-6).sqrt() / (acc_g + 1e-6).sqrt()) * grads[i];
            assert!((p[i] - expect).abs() < 1e-15);
        }

        // Adamax, t = 1: u = |g|, m = 0.1·g → step = −lr/(0.1)·m/(u + ε).
        let mut p = [0.0, 0.0];
        let mut st = OptimizerState::new(OptimizerKind::Adamax, 2);
        optimizer_step(&mut st, &mut p, &grads, lr).unwrap();
        for i in 0..2 {
            let m = 0.1 * grads[i];
            let expect = -(lr / (1.0 - 0.9)) * m / (grads[i].abs() + 1e-8);
            assert!((p[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn every_optimizer_descends_a_quadratic_bowl() {
        // Fit y = W·x with a 1-layer linear net on consistent data; every
        // optimizer must cut the loss by well over half in a few epochs.
        for kind in [
            OptimizerKind::Sgd,
            OptimizerKind::Adam,
            OptimizerKind::RmsProp,
            OptimizerKind::AdaDelta,
            OptimizerKind::Adamax,
        ] {
            let mut r = rng(31);
            let net = Network::new(vec![Layer::Dense(DenseLayer::glorot(
                2,
                2,
                Activation::Linear,
                &mut r,
            ))]);
            let inputs: Vec<Tensor> = (0..64)
                .map(|i| {
                    let a = (i as f64) * 0.39;
                    Tensor::from_vec(&[2], vec![a.sin(), a.cos()]).unwrap()
                })
                .collect();
            let targets: Vec<[f64; 2]> = inputs
                .iter()
                .map(|t| {
                    [
                        0.7 * t.data[0] - 0.2 * t.data[1],
                        0.4 * t.data[0] + 0.9 * t.data[1],
                    ]
                })
                .collect();
            let data = TrainData::new(inputs, targets).unwrap();
            let lr = match kind {
                OptimizerKind::Sgd => 0.5,
                OptimizerKind::AdaDelta => 1.0,
                _ => 0.05,
            };
            let settings = TrainSettings {
                epochs: 40,
                batch_size: 8,
                learning_rate: lr,
                optimizer: kind,
                shuffle_seed: 3,
            };
            let before = dataset_mse(&net, &data).unwrap();
            let outcome = train(net, &data, &data, &settings).unwrap();
            let after = outcome.history.last().unwrap().train_mse;
            assert!(
                after < before * 0.1,
                "{kind:?}: {before:.3e} → {after:.3e}"
            );
            assert_eq!(outcome.history.len(), 40);
        }
    }

    #[test]
    fn training_is_deterministic_and_tracks_best_epoch() {
        let build = || {
            let mut r = rng(13);
            Network::new(vec![
                Layer::Dense(DenseLayer::glorot(2, 6, Activation::Tanh, &mut r)),
                Layer::Dense(DenseLayer::glorot(6, 2, Activation::Linear, &mut r)),
            ])
        };
        let inputs: Vec<Tensor> = (0..48)
            .map(|i| {
                let a = (i as f64) * 0.61;
                Tensor::from_vec(&[2], vec![a.sin(), (2.0 * a).cos()]).unwrap()
            })
            .collect();
        let targets: Vec<[f64; 2]> = inputs
            .iter()
            .map(|t| [t.data[0] * t.data[1], t.data[0] - t.data[1]])
            .collect();
        let data = TrainData::new(inputs, targets).unwrap();
        let settings = TrainSettings {
            epochs: 12,
            batch_size: 16,
            ..TrainSettings::default()
        };

        let a = train(build(), &data, &data, &settings).unwrap();
        let b = train(build(), &data, &data, &settings).unwrap();
        assert_eq!(a.network, b.network);
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.train_mse.to_bits(), y.train_mse.to_bits());
        }

        // best_epoch is the argmin of test MSE, and the retained network
        // reproduces that loss.
        let min_idx = a
            .history
            .iter()
            .enumerate()
            .min_by(|(_, s), (_, t)| s.test_mse.total_cmp(&t.test_mse))
            .map(|(i, _)| i)
            .unwrap();
        assert_eq!(a.best_epoch, min_idx);
        let replay = dataset_mse(&a.network, &data).unwrap();
        assert!((replay - a.history[min_idx].test_mse).abs() < 1e-15);
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let mut r = rng(4);
        let net = Network::new(vec![
            Layer::Dense(DenseLayer::glorot(2, 8, Activation::Relu, &mut r)),
            Layer::Dense(DenseLayer::glorot(8, 2, Activation::Linear, &mut r)),
        ]);
        let inputs: Vec<Tensor> = (0..16)
            .map(|i| Tensor::from_vec(&[2], vec![i as f64, 1.0]).unwrap())
            .collect();
        let targets = vec![[1.0, -1.0]; 16];
        let data = TrainData::new(inputs, targets).unwrap();
        let settings = TrainSettings {
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e12,
            optimizer: OptimizerKind::Sgd,
            shuffle_seed: 0,
        };
        match train(net, &data, &data, &settings) {
            Err(SicError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn network_serializes_and_restores() {
        let mut r = rng(70);
        let net = Network::new(vec![
            Layer::Conv2d(Conv2dLayer::glorot(2, 3, 1, Activation::Relu, &mut r)),
            Layer::ReshapeMaps,
            Layer::Recurrent(RecurrentLayer::glorot(4, 3, Activation::Relu, false, &mut r)),
            Layer::Dense(DenseLayer::glorot(3, 2, Activation::Linear, &mut r)),
        ]);
        let json = serde_json::to_string(&net).unwrap();
        let back: Network = serde_json::from_str(&json).unwrap();
        assert_eq!(net, back);
        let input = Tensor::from_vec(&[5, 2], vec![0.1; 10]).unwrap();
        assert_eq!(
            net.forward(&input).unwrap().data,
            back.forward(&input).unwrap().data
        );
    }
}
