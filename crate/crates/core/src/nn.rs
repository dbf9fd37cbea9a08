//! Dense rectifier networks with hand-written reverse mode, Adam and soft
//! target updates.
//!
//! Everything runs in `f64` on row-major batches (`batch × features`). A net
//! either emits raw values (the Q head) or a log-softmax over its outputs (the
//! batch-policy head). Gradients passed to [`DenseNet::backward`] are always
//! taken with respect to the final affine output, i.e. the logits for a
//! log-softmax head.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    LogSoftmax,
}

/// One affine layer; `weights` is `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self { weights: Array2::zeros(self.weights.raw_dim()), bias: Array1::zeros(self.bias.len()) }
    }
}

#[derive(Debug, Clone)]
pub struct DenseNet {
    layers: Vec<Layer>,
    head: Head,
    // Bumped on every parameter change so stale caches can be detected.
    version: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.head == other.head && self.layers == other.layers
    }
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer (the network input first).
    inputs: Vec<Array2<f64>>,
    /// Affine output of every layer before the rectifier / head.
    pre: Vec<Array2<f64>>,
    version: u64,
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(layer_dims: &[usize], head: Head, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!("degenerate layer dims {layer_dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-limit..=limit));
                Layer { weights, bias: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(Self { layers, head, version: 0 })
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.bias.len()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.bias.len()).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Mutable access to every parameter; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    /// Rebuilds a net from a flat parameter stream in [`DenseNet::params`] order.
    pub fn from_flat(layer_dims: &[usize], head: Head, values: &[f64]) -> Result<Self> {
        let mut net = Self::new(layer_dims, head, 0)?;
        if values.len() != net.num_params() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                net.num_params(),
                values.len()
            )));
        }
        for (p, v) in net.params_mut().zip(values) {
            *p = *v;
        }
        Ok(net)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input has {cols} features, net expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Batched forward pass, keeping what `backward` needs.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = x.dot(&layer.weights) + &layer.bias;
            inputs.push(x);
            x = if i + 1 < self.layers.len() { z.mapv(relu) } else { z.clone() };
            pre.push(z);
        }
        if self.head == Head::LogSoftmax {
            log_softmax_rows(&mut x);
        }
        Ok((x, ForwardCache { inputs, pre, version: self.version }))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut x = input.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = x.dot(&layer.weights) + &layer.bias;
            if i < last {
                x.mapv_inplace(relu);
            }
        }
        if self.head == Head::LogSoftmax {
            log_softmax_rows(&mut x);
        }
        Ok(x)
    }

    /// Single-sample forward pass.
    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.bias.to_vec();
            for (xi, row) in x.iter().zip(layer.weights.rows()) {
                if *xi == 0.0 {
                    continue;
                }
                for (zj, w) in z.iter_mut().zip(row) {
                    *zj += xi * w;
                }
            }
            if i < last {
                z.iter_mut().for_each(|v| *v = relu(*v));
            }
            x = z;
        }
        if self.head == Head::LogSoftmax {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            x.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(x)
    }

    /// Reverse pass. `grad_out` is `∂loss/∂(final affine output)`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<Gradients> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::InvalidState("forward cache is stale".into()));
        }
        let batch = cache.inputs[0].nrows();
        if grad_out.dim() != (batch, self.output_dim()) {
            return Err(Error::InvalidInput(format!(
                "output gradient has shape {:?}, expected ({batch}, {})",
                grad_out.dim(),
                self.output_dim()
            )));
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let weights = cache.inputs[i].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut upstream = delta.dot(&layer.weights.t());
                Zip::from(&mut upstream).and(&cache.pre[i - 1]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = upstream;
            }
            grads.push(Layer { weights, bias });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    fn check_shapes(&self, other: &[Layer]) -> Result<()> {
        let same = self.layers.len() == other.len()
            && self
                .layers
                .iter()
                .zip(other)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len());
        if same {
            Ok(())
        } else {
            Err(Error::InvalidInput("parameter shapes differ".into()))
        }
    }

    /// `θ' ← θ'·τ_s + θ·(1 − τ_s)` applied to `self` as the target.
    pub fn soft_update(&mut self, online: &DenseNet, tau_s: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau_s) {
            return Err(Error::InvalidInput(format!("tau_s = {tau_s} outside [0, 1]")));
        }
        self.check_shapes(&online.layers)?;
        self.version += 1;
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weights).and(&o.weights).for_each(|a, &b| *a = *a * tau_s + b * (1.0 - tau_s));
            Zip::from(&mut t.bias).and(&o.bias).for_each(|a, &b| *a = *a * tau_s + b * (1.0 - tau_s));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &DenseNet) -> f64 {
        self.params().zip(other.params()).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn log_softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

/// Mean squared error and its gradient `2(pred − target)/n`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "mse needs equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

/// Mean negative log-likelihood of `actions` under row-wise log-probabilities,
/// with the gradient with respect to the logits, `(softmax − one_hot)/n`.
pub fn nll_loss(log_probs: ArrayView2<f64>, actions: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = log_probs.dim();
    if n == 0 || n != actions.len() {
        return Err(Error::InvalidInput(format!("nll needs one action per row, got {n} rows and {}", actions.len())));
    }
    if let Some(a) = actions.iter().find(|&&a| a >= k) {
        return Err(Error::InvalidInput(format!("action {a} outside [0, {k})")));
    }
    let scale = 1.0 / n as f64;
    let loss = -actions.iter().enumerate().map(|(i, &a)| log_probs[[i, a]]).sum::<f64>() * scale;
    let mut grad = log_probs.mapv(|lp| lp.exp() * scale);
    for (i, &a) in actions.iter().enumerate() {
        grad[[i, a]] -= scale;
    }
    Ok((loss, grad))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Layer>,
    second: Vec<Layer>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        let zeros: Vec<Layer> = net.layers.iter().map(Layer::zeros_like).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn apply(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        net.check_shapes(&grads.layers)?;
        net.check_shapes(&self.first)?;
        self.step += 1;
        net.version += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, g), m), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.first).zip(&mut self.second) {
            Zip::from(&mut layer.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .and(&g.weights)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}
