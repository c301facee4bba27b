//! Dense feed-forward network with exact backpropagation, Adamax updates and
//! encoder Jacobians, sized for micro autoencoders.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("latent dimension {0} is odd; state/derivative pairs need an even width")]
    OddLatent(usize),
    #[error("forward cache does not match the current parameters")]
    StaleCache,
    #[error("non-finite gradient; step rejected")]
    NonFiniteGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Layer widths of an autoencoder and the position of its latent layer,
/// e.g. `24-24-24-8-24-24-24` with the latent at width index 3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub latent_index: usize,
}

impl Architecture {
    /// The micro autoencoder: input `k`, two hidden layers of 24 per side and
    /// an `n`-wide latent layer.
    pub fn micro(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            widths: vec![input_dim, 24, 24, latent_dim, 24, 24, input_dim],
            latent_index: 3,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.widths[self.latent_index]
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// Tanh everywhere except the identity output layer.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let last = self.widths.len() - 2;
        self.widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation: if i == last {
                    Activation::Identity
                } else {
                    Activation::Tanh
                },
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.widths.len() < 3 {
            return Err(NetError::InvalidArchitecture(
                "need at least input, latent and output widths".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(NetError::InvalidArchitecture("zero-width layer".into()));
        }
        if self.latent_index == 0 || self.latent_index >= self.widths.len() - 1 {
            return Err(NetError::InvalidArchitecture(
                "latent layer must be interior".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        f.write_str(&s.join("-"))
    }
}

impl FromStr for Architecture {
    type Err = NetError;

    /// Parses `"24-24-24-8-24-24-24"`; the narrowest interior width is the
    /// latent layer.
    fn from_str(s: &str) -> Result<Self, NetError> {
        let widths = s
            .split('-')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| NetError::InvalidArchitecture(format!("{s:?}: {e}")))?;
        if widths.len() < 3 {
            return Err(NetError::InvalidArchitecture(format!(
                "{s:?} has fewer than 3 widths"
            )));
        }
        let interior = &widths[1..widths.len() - 1];
        let min = *interior.iter().min().expect("non-empty interior");
        let latent_index = 1 + interior
            .iter()
            .position(|&w| w == min)
            .expect("min present");
        let arch = Self {
            widths,
            latent_index,
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    /// Row-major `[out_dim x in_dim]`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    fn zeros(spec: LayerSpec) -> Self {
        Self {
            spec,
            weights: vec![T::zero(); spec.in_dim * spec.out_dim],
            bias: vec![T::zero(); spec.out_dim],
        }
    }

    fn affine(&self, x: &[T]) -> Vec<T> {
        let n_in = self.spec.in_dim;
        self.bias
            .iter()
            .enumerate()
            .map(|(o, &b)| {
                let row = &self.weights[o * n_in..(o + 1) * n_in];
                row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi)
            })
            .collect()
    }
}

/// Ordered dense layers plus the number of layers that form the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    encoder_depth: usize,
    #[serde(skip)]
    revision: u64,
}

/// Activations recorded by a forward pass over a contiguous layer range.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    layers: Range<usize>,
    revision: u64,
    /// `activations[0]` is the input, `activations[i + 1]` the output of the
    /// `i`-th layer of the range.
    pub activations: Vec<Vec<T>>,
    pub pre_activations: Vec<Vec<T>>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.activations
            .last()
            .expect("cache holds the input at least")
    }

    pub fn layer_range(&self) -> Range<usize> {
        self.layers.clone()
    }
}

/// Gradient buffers with the same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| vec![T::zero(); l.weights.len()])
                .collect(),
            bias: net
                .layers
                .iter()
                .map(|l| vec![T::zero(); l.bias.len()])
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, k: T) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= k);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self
            .weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .zip(other.weights.iter().chain(&other.bias))
        {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    /// Flat view in the canonical parameter order (per layer: weights then bias).
    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.weights.iter().chain(&self.bias).map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder output split into its state half and derivative half; pair `i`
/// is `(z[i], z_dot[i])`, i.e. latent nodes `(i, i + n/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent<T> {
    pub z: Vec<T>,
    pub z_dot: Vec<T>,
}

/// Latent node index pairs `(i, i + n/2)`.
pub fn latent_pairs(latent_dim: usize) -> Result<Vec<(usize, usize)>, NetError> {
    if !latent_dim.is_multiple_of(2) {
        return Err(NetError::OddLatent(latent_dim));
    }
    let h = latent_dim / 2;
    Ok((0..h).map(|i| (i, i + h)).collect())
}

pub fn split_latent<T: Scalar>(v: &[T]) -> Result<Latent<T>, NetError> {
    if !v.len().is_multiple_of(2) {
        return Err(NetError::OddLatent(v.len()));
    }
    let (z, z_dot) = v.split_at(v.len() / 2);
    Ok(Latent {
        z: z.to_vec(),
        z_dot: z_dot.to_vec(),
    })
}

impl<T: Scalar> Network<T> {
    pub fn from_layers(layers: Vec<Layer<T>>, encoder_depth: usize) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::InvalidArchitecture("no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].spec.out_dim != pair[1].spec.in_dim {
                return Err(NetError::InvalidArchitecture(format!(
                    "layer output {} feeds input {}",
                    pair[0].spec.out_dim, pair[1].spec.in_dim
                )));
            }
        }
        for l in &layers {
            if l.weights.len() != l.spec.in_dim * l.spec.out_dim || l.bias.len() != l.spec.out_dim {
                return Err(NetError::InvalidArchitecture(
                    "parameter shapes do not match layer specs".into(),
                ));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(NetError::InvalidArchitecture(
                    "non-finite parameters".into(),
                ));
            }
        }
        if encoder_depth == 0 || encoder_depth > layers.len() {
            return Err(NetError::InvalidArchitecture(format!(
                "encoder depth {encoder_depth} out of range"
            )));
        }
        Ok(Self {
            layers,
            encoder_depth,
            revision: 0,
        })
    }

    pub fn zeros(specs: &[LayerSpec], encoder_depth: usize) -> Result<Self, NetError> {
        Self::from_layers(
            specs.iter().map(|&s| Layer::zeros(s)).collect(),
            encoder_depth,
        )
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng>(
        specs: &[LayerSpec],
        encoder_depth: usize,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let mut net = Self::zeros(specs, encoder_depth)?;
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.spec.in_dim + layer.spec.out_dim) as f64).sqrt();
            for w in &mut layer.weights {
                *w = T::lit(rng.gen_range(-limit..=limit));
            }
        }
        Ok(net)
    }

    pub fn autoencoder<R: Rng>(arch: &Architecture, rng: &mut R) -> Result<Self, NetError> {
        arch.validate()?;
        Self::glorot(&arch.layer_specs(), arch.latent_index, rng)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.revision += 1;
        &mut self.layers
    }

    pub fn encoder_depth(&self) -> usize {
        self.encoder_depth
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").spec.out_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[self.encoder_depth - 1].spec.out_dim
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.spec.out_dim))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn encoder_range(&self) -> Range<usize> {
        0..self.encoder_depth
    }

    pub fn decoder_range(&self) -> Range<usize> {
        self.encoder_depth..self.layers.len()
    }

    /// Runs the whole network.
    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, ForwardCache<T>), NetError> {
        let cache = self.forward_range(0..self.layers.len(), x)?;
        Ok((cache.output().to_vec(), cache))
    }

    /// Runs layers `range` on `x`, where `x` has the input width of the first
    /// layer in the range.
    pub fn forward_range(&self, range: Range<usize>, x: &[T]) -> Result<ForwardCache<T>, NetError> {
        if range.is_empty() || range.end > self.layers.len() {
            return Err(NetError::InvalidArchitecture(format!(
                "layer range {range:?} out of bounds"
            )));
        }
        let first = &self.layers[range.start];
        if x.len() != first.spec.in_dim {
            return Err(NetError::DimensionMismatch {
                expected: first.spec.in_dim,
                found: x.len(),
            });
        }
        let mut activations = Vec::with_capacity(range.len() + 1);
        let mut pre_activations = Vec::with_capacity(range.len());
        activations.push(x.to_vec());
        for layer in &self.layers[range.clone()] {
            let pre = layer.affine(activations.last().expect("input pushed"));
            let post = pre
                .iter()
                .map(|&v| layer.spec.activation.apply(v))
                .collect();
            pre_activations.push(pre);
            activations.push(post);
        }
        Ok(ForwardCache {
            layers: range,
            revision: self.revision,
            activations,
            pre_activations,
        })
    }

    /// Latent vector of `x` (encoder layers only).
    pub fn encode_vec(&self, x: &[T]) -> Result<Vec<T>, NetError> {
        Ok(self
            .forward_range(self.encoder_range(), x)?
            .activations
            .pop()
            .expect("output"))
    }

    pub fn encode(&self, x: &[T]) -> Result<Latent<T>, NetError> {
        if !self.latent_dim().is_multiple_of(2) {
            return Err(NetError::OddLatent(self.latent_dim()));
        }
        split_latent(&self.encode_vec(x)?)
    }

    pub fn decode(&self, latent: &[T]) -> Result<Vec<T>, NetError> {
        if self.decoder_range().is_empty() {
            return Ok(latent.to_vec());
        }
        Ok(self
            .forward_range(self.decoder_range(), latent)?
            .activations
            .pop()
            .expect("output"))
    }

    /// Gradients of a scalar loss whose derivative with respect to the
    /// cached output is `output_grad`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        output_grad: &[T],
    ) -> Result<Gradients<T>, NetError> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(cache, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the cached input.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<T>,
        output_grad: &[T],
        grads: &mut Gradients<T>,
    ) -> Result<Vec<T>, NetError> {
        if cache.revision != self.revision
            || cache.layers.end > self.layers.len()
            || cache.activations.len() != cache.layers.len() + 1
        {
            return Err(NetError::StaleCache);
        }
        for (k, l) in cache.layers.clone().enumerate() {
            if cache.activations[k].len() != self.layers[l].spec.in_dim {
                return Err(NetError::StaleCache);
            }
        }
        if output_grad.len() != cache.output().len() {
            return Err(NetError::DimensionMismatch {
                expected: cache.output().len(),
                found: output_grad.len(),
            });
        }
        let mut upstream = output_grad.to_vec();
        for (k, l) in cache.layers.clone().enumerate().rev() {
            let layer = &self.layers[l];
            let (n_in, act) = (layer.spec.in_dim, layer.spec.activation);
            let input = &cache.activations[k];
            let output = &cache.activations[k + 1];
            let delta: Vec<T> = upstream
                .iter()
                .zip(output)
                .map(|(&g, &y)| g * act.derivative_from_output(y))
                .collect();
            let gw = &mut grads.weights[l];
            let gb = &mut grads.bias[l];
            let mut downstream = vec![T::zero(); n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                gb[o] += d;
                let row = o * n_in;
                for i in 0..n_in {
                    gw[row + i] += d * input[i];
                    downstream[i] += d * layer.weights[row + i];
                }
            }
            upstream = downstream;
        }
        Ok(upstream)
    }

    /// Exact `[n x k]` Jacobian of the encoder at `x`, by forward-mode
    /// accumulation `D_L W_L ... D_1 W_1`.
    pub fn encoder_jacobian(&self, x: &[T]) -> Result<Matrix<T>, NetError> {
        let cache = self.forward_range(self.encoder_range(), x)?;
        let k = self.input_dim();
        let mut jac = Matrix::identity(k);
        for (idx, layer) in self.layers[self.encoder_range()].iter().enumerate() {
            let w = Matrix::from_row_major(
                layer.spec.out_dim,
                layer.spec.in_dim,
                layer.weights.clone(),
            );
            let mut next = w.matmul(&jac);
            let output = &cache.activations[idx + 1];
            for o in 0..layer.spec.out_dim {
                let d = layer.spec.activation.derivative_from_output(output[o]);
                for j in 0..k {
                    next[(o, j)] *= d;
                }
            }
            jac = next;
        }
        Ok(jac)
    }

    /// Flat parameter vector in the canonical order used by `Gradients::iter`.
    pub fn flat_params(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .copied()
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<(), NetError> {
        if flat.len() != self.n_params() {
            return Err(NetError::DimensionMismatch {
                expected: self.n_params(),
                found: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in self.layers_mut() {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Lossless widening to `f64` / narrowing from it.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    weights: l.weights.iter().map(|v| U::lit(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
            encoder_depth: self.encoder_depth,
            revision: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adamax optimizer state: first moment `m`, infinity-norm accumulator `u`.
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// u <- max(b2 u, |g|)
/// p <- p - lr / (1 - b1^t) * m / (u + eps)
/// ```
#[derive(Debug, Clone)]
pub struct AdamaxState<T> {
    pub m: Gradients<T>,
    pub u: Gradients<T>,
    pub step: u64,
    pub config: AdamaxConfig,
}

impl<T: Scalar> AdamaxState<T> {
    pub fn new(net: &Network<T>, config: AdamaxConfig) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            u: Gradients::zeros_like(net),
            step: 0,
            config,
        }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<(), NetError> {
        if grads.len() != self.m.len() {
            return Err(NetError::DimensionMismatch {
                expected: self.m.len(),
                found: grads.len(),
            });
        }
        if !grads.is_finite() {
            return Err(NetError::NonFiniteGradient);
        }
        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let eps = T::lit(self.config.epsilon);
        let bias_correction = T::one() - b1.powi(self.step.min(i32::MAX as u64) as i32);
        let rate = T::lit(self.config.learning_rate) / bias_correction;
        for (l, layer) in net.layers_mut().iter_mut().enumerate() {
            let tensors = [
                (
                    &mut layer.weights,
                    &mut self.m.weights[l],
                    &mut self.u.weights[l],
                    &grads.weights[l],
                ),
                (
                    &mut layer.bias,
                    &mut self.m.bias[l],
                    &mut self.u.bias[l],
                    &grads.bias[l],
                ),
            ];
            for (params, m, u, g) in tensors {
                for i in 0..params.len() {
                    m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                    u[i] = (b2 * u[i]).max(g[i].abs());
                    params[i] -= rate * m[i] / (u[i] + eps);
                }
            }
        }
        Ok(())
    }
}
