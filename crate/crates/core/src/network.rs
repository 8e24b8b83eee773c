//! Detection-pooling networks: rectified affine detection layers followed by
//! sum or L^p pooling over contiguous groups, ending in one scalar output.
//!
//! Inference, input gradients and minibatch SGD on the squared error all
//! live here. Gradients are derived by hand; there is no autodiff.

use std::sync::{Arc, OnceLock};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{self, Reduction, Tensor, TensorError};

/// Slack allowed when checking inputs against pixel bounds.
const BOUNDS_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input has shape {actual:?}, network expects {expected:?}")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("input value {value} at index {index} lies outside the bounds [{low}, {high}]")]
    OutOfBounds {
        index: usize,
        value: f64,
        low: f64,
        high: f64,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training data is empty")]
    EmptyData,
    #[error("training diverged at iteration {iteration}: minibatch loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Weight matrix plus input-independent matrices derived from it, built on
/// first use.
#[derive(Debug)]
struct Weights {
    matrix: Tensor,
    positive: OnceLock<Tensor>,
    negative: OnceLock<Tensor>,
    squared_shares: OnceLock<Tensor>,
}

impl Weights {
    fn new(matrix: Tensor) -> Arc<Self> {
        Arc::new(Self {
            matrix,
            positive: OnceLock::new(),
            negative: OnceLock::new(),
            squared_shares: OnceLock::new(),
        })
    }
}

/// Rectified affine map `x_j = max(0, Σ_i x_i w_ij + b_j)`.
///
/// Clones share the weight matrix and its derived parts.
#[derive(Clone, Debug)]
pub struct DetectionLayer {
    weights: Arc<Weights>,
    biases: Tensor,
    constrain_bias_nonpositive: bool,
}

impl PartialEq for DetectionLayer {
    fn eq(&self, other: &Self) -> bool {
        self.weights.matrix == other.weights.matrix
            && self.biases == other.biases
            && self.constrain_bias_nonpositive == other.constrain_bias_nonpositive
    }
}

impl DetectionLayer {
    /// `weights` is `[d_in, d_out]`, `biases` has `d_out` entries.
    pub fn new(weights: Tensor, biases: Tensor, constrain_bias_nonpositive: bool) -> Result<Self> {
        weights.dims2()?;
        Self::assemble(Weights::new(weights), biases, constrain_bias_nonpositive)
    }

    /// Same weights (shared, not copied) with other biases.
    pub fn with_biases(&self, biases: Tensor) -> Result<Self> {
        Self::assemble(Arc::clone(&self.weights), biases, self.constrain_bias_nonpositive)
    }

    fn assemble(weights: Arc<Weights>, biases: Tensor, constrain_bias_nonpositive: bool) -> Result<Self> {
        let d_out = weights.matrix.shape()[1];
        if biases.len() != d_out {
            return Err(NetworkError::Architecture(format!(
                "{d_out} detection units but {} biases",
                biases.len()
            )));
        }
        let biases = biases.flatten();
        if constrain_bias_nonpositive && biases.max() > 0.0 {
            return Err(NetworkError::Architecture(
                "bias-constrained layer has a positive bias".into(),
            ));
        }
        Ok(Self {
            weights,
            biases,
            constrain_bias_nonpositive,
        })
    }

    /// Normal(0, std) weights and zero biases.
    pub fn random(d_in: usize, d_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| NetworkError::Config(format!("weight init std {std}: {e}")))?;
        let data = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
        Self::new(Tensor::matrix(d_in, d_out, data)?, Tensor::zeros(vec![d_out])?, true)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights.matrix
    }

    /// `W⁺ = max(0, W)`.
    pub fn positive_weights(&self) -> &Tensor {
        self.weights.positive.get_or_init(|| self.weights().positive_part())
    }

    /// `W⁻ = min(0, W)`.
    pub fn negative_weights(&self) -> &Tensor {
        self.weights.negative.get_or_init(|| self.weights().negative_part())
    }

    /// `w_ij² / Σ_i' w_i'j²`; columns of zeros give zeros.
    pub fn squared_weight_shares(&self) -> &Tensor {
        self.weights.squared_shares.get_or_init(|| {
            let w = self.weights();
            let (d_in, d_out) = (self.input_dim(), self.output_dim());
            let v = w.mul(w).expect("same shape");
            let colsums = tensor::reduce(&v, Reduction::Sum, 0)
                .and_then(|c| c.replicate_rows(d_in))
                .and_then(|c| c.reshape(vec![d_in, d_out]))
                .expect("column sums of a matrix");
            v.guarded_div(&colsums).expect("same shape")
        })
    }

    pub fn biases(&self) -> &Tensor {
        &self.biases
    }

    pub fn constrains_bias(&self) -> bool {
        self.constrain_bias_nonpositive
    }

    pub fn input_dim(&self) -> usize {
        self.weights().shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights().shape()[1]
    }

    /// `Σ_i x_i w_ij + b_j` for a flat input.
    pub fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        let row = x.reshape(vec![1, x.len()])?;
        let z = tensor::matmul(&row, self.weights())?.flatten();
        Ok(z.add(&self.biases)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.pre_activation(x)?.map(|v| v.max(0.0)))
    }
}

/// Pools contiguous groups of `group_size` units with the L^p norm.
/// `p = 1` is sum-pooling over the nonnegative detections, `p = ∞` max-pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingLayer {
    group_size: usize,
    p: f64,
}

impl PoolingLayer {
    pub fn new(group_size: usize, p: f64) -> Result<Self> {
        if group_size == 0 {
            return Err(NetworkError::Architecture("pooling group size is zero".into()));
        }
        if !(p >= 1.0) {
            return Err(NetworkError::Architecture(format!(
                "pooling exponent must be >= 1, got {p}"
            )));
        }
        Ok(Self { group_size, p })
    }

    pub fn sum(group_size: usize) -> Result<Self> {
        Self::new(group_size, 1.0)
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn exponent(&self) -> f64 {
        self.p
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() % self.group_size != 0 {
            return Err(NetworkError::Architecture(format!(
                "{} units cannot be pooled in groups of {}",
                x.len(),
                self.group_size
            )));
        }
        let groups = x.reshape(vec![x.len() / self.group_size, self.group_size])?;
        Ok(tensor::reduce(&groups, Reduction::LpNorm(self.p), 1)?)
    }

    /// `∂x_k/∂x_j` for every unit `j`, given the group inputs and outputs.
    fn local_gradient(&self, inputs: &[f64], outputs: &[f64]) -> Vec<f64> {
        let g = self.group_size;
        let mut out = vec![0.0; inputs.len()];
        for (k, &xk) in outputs.iter().enumerate() {
            let group = &inputs[k * g..(k + 1) * g];
            let dst = &mut out[k * g..(k + 1) * g];
            if self.p == 1.0 {
                for (d, &x) in dst.iter_mut().zip(group) {
                    *d = if x >= 0.0 { 1.0 } else { -1.0 };
                }
            } else if self.p.is_infinite() {
                let mut best = 0;
                for (j, &x) in group.iter().enumerate() {
                    if x.abs() > group[best].abs() {
                        best = j;
                    }
                }
                dst[best] = 1.0;
            } else if xk > 0.0 {
                for (d, &x) in dst.iter_mut().zip(group) {
                    *d = x.signum() * (x.abs() / xk).powf(self.p - 1.0);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Detection(DetectionLayer),
    Pooling(PoolingLayer),
}

/// Per-dimension admissible input box `[low, high]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelBounds {
    low: Tensor,
    high: Tensor,
}

impl PixelBounds {
    pub fn new(low: Tensor, high: Tensor) -> Result<Self> {
        if low.len() != high.len() {
            return Err(NetworkError::Architecture(format!(
                "bounds have {} lower and {} upper entries",
                low.len(),
                high.len()
            )));
        }
        if low.data().iter().zip(high.data()).any(|(l, h)| l > h) {
            return Err(NetworkError::Architecture("lower bound exceeds upper bound".into()));
        }
        Ok(Self {
            low: low.flatten(),
            high: high.flatten(),
        })
    }

    pub fn uniform(len: usize, low: f64, high: f64) -> Result<Self> {
        Self::new(Tensor::full(vec![len], low)?, Tensor::full(vec![len], high)?)
    }

    pub fn low(&self) -> &Tensor {
        &self.low
    }

    pub fn high(&self) -> &Tensor {
        &self.high
    }

    pub fn len(&self) -> usize {
        self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }

    /// First index where `x` leaves the box, if any.
    pub fn violation(&self, x: &Tensor) -> Option<(usize, f64, f64, f64)> {
        x.data()
            .iter()
            .zip(self.low.data().iter().zip(self.high.data()))
            .enumerate()
            .find(|(_, (&v, (&l, &h)))| v < l - BOUNDS_SLACK || v > h + BOUNDS_SLACK)
            .map(|(i, (&v, (&l, &h)))| (i, v, l, h))
    }
}

/// What `forward` does with inputs outside the pixel bounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BoundsPolicy {
    Ignore,
    #[default]
    Warn,
    Error,
}

/// Named architectures used by the MNIST experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 28×56 inputs → 400 detections → sum-pooled output.
    MnistOneLayer,
    /// 28×56 → 400 detections sum-pooled in groups of 4 → 100 → 400 → 1.
    MnistTwoLayer,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::MnistOneLayer => "mnist-one-layer",
            Preset::MnistTwoLayer => "mnist-two-layer",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "mnist-one-layer" => Some(Preset::MnistOneLayer),
            "mnist-two-layer" => Some(Preset::MnistTwoLayer),
            _ => None,
        }
    }
}

pub const MNIST_PAIR_SHAPE: [usize; 2] = [28, 56];
pub const PIXEL_LOW: f64 = -0.5;
pub const PIXEL_HIGH: f64 = 1.5;

/// Activations recorded by [`Network::forward`]. `activations[0]` is the
/// flattened input and `activations[i + 1]` the output of layer `i`.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    activations: Vec<Tensor>,
    pre_activations: Vec<Option<Tensor>>,
}

impl ActivationTrace {
    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    /// Input to layer `layer`.
    pub fn layer_input(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn layer_output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    pub fn pre_activation(&self, layer: usize) -> Option<&Tensor> {
        self.pre_activations[layer].as_ref()
    }

    /// The scalar network output `f(x)`.
    pub fn output(&self) -> f64 {
        self.activations.last().map(|t| t.data()[0]).unwrap_or(0.0)
    }

    pub fn num_layers(&self) -> usize {
        self.pre_activations.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    bounds: Option<PixelBounds>,
    bounds_policy: BoundsPolicy,
}

impl Network {
    /// Validates that layers alternate detection/pooling, extents chain, and
    /// the last pooling layer produces a single output.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, bounds: Option<PixelBounds>) -> Result<Self> {
        let mut width: usize = input_shape.iter().product();
        if width == 0 {
            return Err(NetworkError::Architecture("empty input shape".into()));
        }
        if layers.is_empty() || layers.len() % 2 != 0 {
            return Err(NetworkError::Architecture(
                "expected alternating detection and pooling layers".into(),
            ));
        }
        for (i, layer) in layers.iter().enumerate() {
            match (i % 2, layer) {
                (0, Layer::Detection(d)) => {
                    if d.input_dim() != width {
                        return Err(NetworkError::Architecture(format!(
                            "layer {i} expects {} inputs but receives {width}",
                            d.input_dim()
                        )));
                    }
                    width = d.output_dim();
                }
                (1, Layer::Pooling(p)) => {
                    if width % p.group_size() != 0 {
                        return Err(NetworkError::Architecture(format!(
                            "layer {i} pools {width} units in groups of {}",
                            p.group_size()
                        )));
                    }
                    width /= p.group_size();
                }
                _ => {
                    return Err(NetworkError::Architecture(format!(
                        "layer {i} breaks the detection/pooling alternation"
                    )))
                }
            }
        }
        if width != 1 {
            return Err(NetworkError::Architecture(format!(
                "network ends with {width} outputs, expected 1"
            )));
        }
        let input_len: usize = input_shape.iter().product();
        if let Some(b) = &bounds {
            if b.len() != input_len {
                return Err(NetworkError::Architecture(format!(
                    "bounds cover {} inputs, network has {input_len}",
                    b.len()
                )));
            }
        }
        Ok(Self {
            layers,
            input_shape,
            bounds,
            bounds_policy: BoundsPolicy::default(),
        })
    }

    /// Builds a network from (detection, pooling) blocks.
    pub fn from_blocks(
        input_shape: Vec<usize>,
        blocks: Vec<(DetectionLayer, PoolingLayer)>,
        bounds: Option<PixelBounds>,
    ) -> Result<Self> {
        let layers = blocks
            .into_iter()
            .flat_map(|(d, p)| [Layer::Detection(d), Layer::Pooling(p)])
            .collect();
        Self::new(input_shape, layers, bounds)
    }

    /// Randomly initialized preset with bias-constrained detection layers.
    pub fn preset(preset: Preset, weight_init_std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in: usize = MNIST_PAIR_SHAPE.iter().product();
        let blocks = match preset {
            Preset::MnistOneLayer => vec![(
                DetectionLayer::random(d_in, 400, weight_init_std, &mut rng)?,
                PoolingLayer::sum(400)?,
            )],
            Preset::MnistTwoLayer => vec![
                (
                    DetectionLayer::random(d_in, 400, weight_init_std, &mut rng)?,
                    PoolingLayer::sum(4)?,
                ),
                (
                    DetectionLayer::random(100, 400, weight_init_std, &mut rng)?,
                    PoolingLayer::sum(400)?,
                ),
            ],
        };
        Self::from_blocks(
            MNIST_PAIR_SHAPE.to_vec(),
            blocks,
            Some(PixelBounds::uniform(d_in, PIXEL_LOW, PIXEL_HIGH)?),
        )
    }

    pub fn with_bounds_policy(mut self, policy: BoundsPolicy) -> Self {
        self.bounds_policy = policy;
        self
    }

    pub fn bounds_policy(&self) -> BoundsPolicy {
        self.bounds_policy
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn bounds(&self) -> Option<&PixelBounds> {
        self.bounds.as_ref()
    }

    /// `(layer index, detection, pooling)` for every block, bottom first.
    pub fn blocks(&self) -> impl DoubleEndedIterator<Item = (usize, &DetectionLayer, &PoolingLayer)> {
        self.layers.chunks(2).enumerate().map(|(b, pair)| match pair {
            [Layer::Detection(d), Layer::Pooling(p)] => (2 * b, d, p),
            _ => unreachable!("alternation checked in Network::new"),
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.layers.len() / 2
    }

    pub fn detection(&self, block: usize) -> &DetectionLayer {
        match &self.layers[2 * block] {
            Layer::Detection(d) => d,
            Layer::Pooling(_) => unreachable!("alternation checked in Network::new"),
        }
    }

    pub fn pooling(&self, block: usize) -> &PoolingLayer {
        match &self.layers[2 * block + 1] {
            Layer::Pooling(p) => p,
            Layer::Detection(_) => unreachable!("alternation checked in Network::new"),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<Tensor> {
        let flat_ok = x.rank() == 1 && x.len() == self.input_len();
        if x.shape() != self.input_shape.as_slice() && !flat_ok {
            return Err(NetworkError::InputShape {
                expected: self.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        let flat = x.flatten();
        if let (Some(bounds), policy) = (&self.bounds, self.bounds_policy) {
            if policy != BoundsPolicy::Ignore {
                if let Some((index, value, low, high)) = bounds.violation(&flat) {
                    let err = NetworkError::OutOfBounds {
                        index,
                        value,
                        low,
                        high,
                    };
                    if policy == BoundsPolicy::Error {
                        return Err(err);
                    }
                    warn!("{err}");
                }
            }
        }
        Ok(flat)
    }

    pub fn forward(&self, x: &Tensor) -> Result<ActivationTrace> {
        let mut current = self.check_input(x)?;
        let mut activations = vec![current.clone()];
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Detection(d) => {
                    let z = d.pre_activation(&current)?;
                    current = z.map(|v| v.max(0.0));
                    pre_activations.push(Some(z));
                }
                Layer::Pooling(p) => {
                    current = p.forward(&current)?;
                    pre_activations.push(None);
                }
            }
            activations.push(current.clone());
        }
        Ok(ActivationTrace {
            activations,
            pre_activations,
        })
    }

    pub fn output(&self, x: &Tensor) -> Result<f64> {
        Ok(self.forward(x)?.output())
    }

    /// `∂f/∂x`, shaped like `x`. Rectifiers have zero slope at exactly 0;
    /// max-pooling routes the gradient to the first maximal unit.
    pub fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        let trace = self.forward(x)?;
        self.gradient_from_trace(&trace)?
            .reshape(x.shape().to_vec())
            .map_err(Into::into)
    }

    /// Input gradient (flat) for an existing trace.
    pub fn gradient_from_trace(&self, trace: &ActivationTrace) -> Result<Tensor> {
        let mut grad = vec![1.0];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::Pooling(p) => {
                    let local = p.local_gradient(trace.layer_input(i).data(), trace.layer_output(i).data());
                    let g = p.group_size();
                    grad = local.iter().enumerate().map(|(j, &l)| l * grad[j / g]).collect();
                }
                Layer::Detection(d) => {
                    let z = trace.pre_activation(i).expect("detection pre-activation");
                    let gz: Vec<f64> = grad
                        .iter()
                        .zip(z.data())
                        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                        .collect();
                    let gz = Tensor::from_parts(vec![1, gz.len()], gz);
                    grad = tensor::matmul_transpose_rhs(&gz, d.weights())?.into_data();
                }
            }
        }
        Ok(Tensor::from_parts(vec![grad.len()], grad))
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

/// Anything that can serve as a regression example for [`train_sgd`].
pub trait Example {
    fn input(&self) -> &Tensor;
    fn target(&self) -> f64;
}

impl Example for (Tensor, f64) {
    fn input(&self) -> &Tensor {
        &self.0
    }
    fn target(&self) -> f64 {
        self.1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub weight_init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            minibatch_size: 20,
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_init_std: 0.05,
            seed: 0,
        }
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(NetworkError::Config("minibatch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(NetworkError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_init_std > 0.0) {
            return Err(NetworkError::Config(format!(
                "weight init std must be positive, got {}",
                self.weight_init_std
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub iterations: usize,
    /// Mean squared error over the whole training set before and after.
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Rows of a minibatch stacked into a `[batch, width]` matrix.
fn stack_rows<'a>(rows: impl Iterator<Item = &'a Tensor>, width: usize) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(r.data());
        n += 1;
    }
    debug_assert_eq!(data.len(), n * width);
    Tensor::from_parts(vec![n, width], data)
}

/// Mean squared error of the network over `data`.
pub fn mean_squared_error<E: Example>(net: &Network, data: &[E]) -> Result<f64> {
    if data.is_empty() {
        return Err(NetworkError::EmptyData);
    }
    let mut total = 0.0;
    for chunk in data.chunks(64) {
        let batch = stack_rows(chunk.iter().map(|e| e.input()), net.input_len());
        let out = batch_forward(net, &batch)?;
        let f = out.last().expect("output").data();
        total += chunk.iter().zip(f).map(|(e, &f)| (f - e.target()).powi(2)).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

/// Forward pass over a `[batch, d]` matrix; returns every layer's
/// activations (index 0 is the batch itself).
fn batch_forward(net: &Network, batch: &Tensor) -> Result<Vec<Tensor>> {
    let mut acts = vec![batch.clone()];
    for layer in net.layers() {
        let a = acts.last().expect("nonempty");
        let (rows, width) = a.dims2()?;
        let next = match layer {
            Layer::Detection(d) => {
                let mut z = tensor::matmul(a, d.weights())?.into_data();
                let n = d.output_dim();
                for row in z.chunks_mut(n) {
                    for (v, &b) in row.iter_mut().zip(d.biases().data()) {
                        *v = (*v + b).max(0.0);
                    }
                }
                Tensor::from_parts(vec![rows, n], z)
            }
            Layer::Pooling(p) => {
                let g = p.group_size();
                let grouped = a.reshape(vec![rows * width / g, g])?;
                tensor::reduce(&grouped, Reduction::LpNorm(p.exponent()), 1)?.reshape(vec![rows, width / g])?
            }
        };
        acts.push(next);
    }
    Ok(acts)
}

/// Minibatch SGD on the mean squared error. Constrained biases are projected
/// onto `b ≤ 0` after every step.
pub fn train_sgd<E: Example>(net: &Network, data: &[E], cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NetworkError::EmptyData);
    }
    for e in data {
        if e.input().len() != net.input_len() {
            return Err(NetworkError::InputShape {
                expected: net.input_shape().to_vec(),
                actual: e.input().shape().to_vec(),
            });
        }
    }
    let mut net = net.clone();
    let initial_mse = mean_squared_error(&net, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();

    for iteration in 0..cfg.iterations {
        let mut picked = Vec::with_capacity(cfg.minibatch_size);
        while picked.len() < cfg.minibatch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let batch = stack_rows(picked.iter().map(|&i| data[i].input()), net.input_len());
        let acts = batch_forward(&net, &batch)?;
        let out = acts.last().expect("output").data();
        let scale = 2.0 / picked.len() as f64;
        let mut loss = 0.0;
        let mut grad: Vec<f64> = picked
            .iter()
            .zip(out)
            .map(|(&i, &f)| {
                let r = f - data[i].target();
                loss += r * r;
                scale * r
            })
            .collect();
        loss /= picked.len() as f64;
        if !loss.is_finite() {
            return Err(NetworkError::Diverged { iteration, loss });
        }

        let rows = picked.len();
        let n_layers = net.layers().len();
        for li in (0..n_layers).rev() {
            let input = &acts[li];
            let output = &acts[li + 1];
            let (_, width_in) = input.dims2()?;
            let layer = &mut net.layers_mut()[li];
            match layer {
                Layer::Pooling(p) => {
                    let (_, width_out) = output.dims2()?;
                    let mut next = vec![0.0; rows * width_in];
                    for r in 0..rows {
                        let local = p.local_gradient(
                            &input.data()[r * width_in..(r + 1) * width_in],
                            &output.data()[r * width_out..(r + 1) * width_out],
                        );
                        let g = p.group_size();
                        for (j, l) in local.into_iter().enumerate() {
                            next[r * width_in + j] = l * grad[r * width_out + j / g];
                        }
                    }
                    grad = next;
                }
                Layer::Detection(d) => {
                    // Rectifier mask: the stored output is positive exactly
                    // where the pre-activation is.
                    for (g, &a) in grad.iter_mut().zip(output.data()) {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    let gz = Tensor::from_parts(vec![rows, d.output_dim()], grad);
                    let next = if li > 0 {
                        tensor::matmul_transpose_rhs(&gz, d.weights())?.into_data()
                    } else {
                        Vec::new()
                    };
                    let dw = tensor::matmul_transpose_lhs(input, &gz)?;
                    let db = tensor::reduce(&gz, Reduction::Sum, 0)?;
                    apply_step(d, &dw, &db, cfg.learning_rate);
                    grad = next;
                }
            }
        }
    }

    let final_mse = mean_squared_error(&net, data)?;
    if !final_mse.is_finite() {
        return Err(NetworkError::Diverged {
            iteration: cfg.iterations,
            loss: final_mse,
        });
    }
    Ok((
        net,
        TrainReport {
            iterations: cfg.iterations,
            initial_mse,
            final_mse,
        },
    ))
}

fn apply_step(d: &mut DetectionLayer, dw: &Tensor, db: &Tensor, lr: f64) {
    let w: Vec<f64> = d
        .weights()
        .data()
        .iter()
        .zip(dw.data())
        .map(|(w, g)| w - lr * g)
        .collect();
    let constrain = d.constrain_bias_nonpositive;
    let b: Vec<f64> = d
        .biases
        .data()
        .iter()
        .zip(db.data())
        .map(|(b, g)| {
            let v = b - lr * g;
            if constrain {
                v.min(0.0)
            } else {
                v
            }
        })
        .collect();
    d.weights = Weights::new(Tensor::from_parts(d.weights().shape().to_vec(), w));
    d.biases = Tensor::from_parts(d.biases.shape().to_vec(), b);
}
