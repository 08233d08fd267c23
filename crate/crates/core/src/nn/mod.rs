//! Minimal dense-network engine.
//!
//! Just enough machinery to train the outcome and propensity heads:
//! dense layers with ELU or linear activation, inverted-dropout masks,
//! analytic backpropagation, and an adaptive-moment optimizer. Parameter
//! uncertainty is represented by Monte-Carlo dropout: a [`DropoutMask`]
//! held fixed across inputs acts as one posterior draw of the network
//! function.
//!
//! All forward/backward code works on `f64` batches (`rows = examples`).
//! A frozen network is plain data and can be shared read-only across
//! threads; training mutates parameters and is single-threaded.

mod adam;
pub mod train;

pub use adam::AdamState;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("layer {index} output dim {out} does not compose with layer {} input dim {next_in}", index + 1)]
    LayerDims {
        index: usize,
        out: usize,
        next_in: usize,
    },
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("non-finite parameter at flat index {index}")]
    NonFiniteParam { index: usize },
    #[error("non-finite gradient at flat index {index}")]
    NonFiniteGradient { index: usize },
    #[error("forward trace does not match this network")]
    TraceMismatch,
}

/// Element-wise activation applied after a layer's affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Elu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp() - 1.0
                }
            }
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
        }
    }
}

/// One dense layer: `h = act(W x + b)`, optionally followed by dropout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major weights with shape `(out_dim, in_dim)`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
    /// Whether a dropout mask applies to this layer's output.
    pub dropout: bool,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// A feed-forward stack of dense layers with a shared dropout rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNetwork {
    layers: Vec<Layer>,
    dropout_rate: f64,
    rng_seed: u64,
}

/// One posterior draw of the network function: a fixed per-layer mask.
///
/// Entries are `0` or `1 / keep_probability` (inverted dropout), so the
/// expected activation under the mask distribution equals the unmasked
/// activation.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    /// One entry per layer; `None` for layers without dropout.
    scales: Vec<Option<Array1<f64>>>,
    keep_probability: f64,
}

impl DropoutMask {
    pub fn keep_probability(&self) -> f64 {
        self.keep_probability
    }

    /// Per-layer mask vectors (`None` where the layer has no dropout).
    pub fn layer_scales(&self) -> &[Option<Array1<f64>>] {
        &self.scales
    }
}

/// Per-example dropout used during training (one mask row per example).
#[derive(Debug, Clone)]
pub struct BatchDropout {
    scales: Vec<Option<Array2<f64>>>,
}

/// Cached intermediates from a forward pass, consumed by [`DenseNetwork::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Array2<f64>,
    /// Pre-activation values per layer.
    pre: Vec<Array2<f64>>,
    /// Post-activation (and post-dropout) values per layer.
    post: Vec<Array2<f64>>,
    /// Dropout multipliers actually applied, per layer.
    applied: Vec<Option<Array2<f64>>>,
    shape: Vec<(usize, usize)>,
}

impl ForwardTrace {
    /// Network outputs for the traced batch.
    pub fn outputs(&self) -> ArrayView2<'_, f64> {
        self.post.last().expect("trace has at least one layer").view()
    }
}

/// Parameter gradients, aligned with the network's layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.biases.raw_dim())).collect(),
        }
    }
}

impl DenseNetwork {
    /// Fan-in-scaled uniform initialization (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))`)
    /// for a stack of ELU hidden layers followed by a linear output layer.
    /// Hidden layers carry dropout; the output layer does not.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mut rng = crate::seeding::rng(crate::seeding::derive(
            seed,
            crate::seeding::Stream::WeightInit,
            0,
        ));
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut in_dim = input_dim;
        for &width in hidden {
            layers.push(Self::random_layer(in_dim, width, Activation::Elu, true, &mut rng));
            in_dim = width;
        }
        layers.push(Self::random_layer(in_dim, output_dim, Activation::Linear, false, &mut rng));
        Self::from_layers(layers, dropout_rate, seed)
    }

    /// Like [`DenseNetwork::init`] but every layer (including the last)
    /// is ELU with dropout — used for feature-extractor trunks.
    pub fn init_trunk(
        input_dim: usize,
        hidden: &[usize],
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mut rng = crate::seeding::rng(crate::seeding::derive(
            seed,
            crate::seeding::Stream::WeightInit,
            1,
        ));
        let mut layers = Vec::with_capacity(hidden.len());
        let mut in_dim = input_dim;
        for &width in hidden {
            layers.push(Self::random_layer(in_dim, width, Activation::Elu, true, &mut rng));
            in_dim = width;
        }
        Self::from_layers(layers, dropout_rate, seed)
    }

    fn random_layer(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        dropout: bool,
        rng: &mut impl Rng,
    ) -> Layer {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights =
            Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..bound));
        let biases = Array1::from_shape_fn(out_dim, |_| rng.random_range(-bound..bound));
        Layer { weights, biases, activation, dropout }
    }

    /// Build from explicit layers, validating the structural invariants.
    pub fn from_layers(
        layers: Vec<Layer>,
        dropout_rate: f64,
        rng_seed: u64,
    ) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(NnError::DropoutRate(dropout_rate));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::LayerDims {
                    index: i,
                    out: pair[0].out_dim(),
                    next_in: pair[1].in_dim(),
                });
            }
        }
        let net = DenseNetwork { layers, dropout_rate, rng_seed };
        net.check_finite()?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Verify every parameter is finite; returns the flat index of the
    /// first offender otherwise.
    pub fn check_finite(&self) -> Result<(), NnError> {
        let mut index = 0usize;
        for layer in &self.layers {
            for &w in layer.weights.iter() {
                if !w.is_finite() {
                    return Err(NnError::NonFiniteParam { index });
                }
                index += 1;
            }
            for &b in layer.biases.iter() {
                if !b.is_finite() {
                    return Err(NnError::NonFiniteParam { index });
                }
                index += 1;
            }
        }
        Ok(())
    }

    fn shape_fingerprint(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.out_dim(), l.in_dim())).collect()
    }

    /// Draw one dropout mask (a posterior sample of the network function).
    /// Entries are i.i.d. `Bernoulli(1 - rate)` scaled by `1/(1 - rate)`.
    pub fn sample_mask(&self, rng: &mut impl Rng) -> DropoutMask {
        let keep = 1.0 - self.dropout_rate;
        let scale = 1.0 / keep;
        let scales = self
            .layers
            .iter()
            .map(|layer| {
                layer.dropout.then(|| {
                    Array1::from_shape_fn(layer.out_dim(), |_| {
                        if rng.random::<f64>() < keep {
                            scale
                        } else {
                            0.0
                        }
                    })
                })
            })
            .collect();
        DropoutMask { scales, keep_probability: keep }
    }

    /// Per-example masks for one training batch.
    pub fn sample_batch_dropout(&self, batch: usize, rng: &mut impl Rng) -> BatchDropout {
        let keep = 1.0 - self.dropout_rate;
        let scale = 1.0 / keep;
        let scales = self
            .layers
            .iter()
            .map(|layer| {
                layer.dropout.then(|| {
                    Array2::from_shape_fn((batch, layer.out_dim()), |_| {
                        if rng.random::<f64>() < keep {
                            scale
                        } else {
                            0.0
                        }
                    })
                })
            })
            .collect();
        BatchDropout { scales }
    }

    /// Forward pass for a single input. With `mask` absent the dropout
    /// expectation (identity) is used.
    pub fn forward(
        &self,
        input: ArrayView1<'_, f64>,
        mask: Option<&DropoutMask>,
    ) -> Result<Array1<f64>, NnError> {
        let batch = input.insert_axis(Axis(0));
        let out = self.forward_batch(batch, mask)?;
        Ok(out.index_axis(Axis(0), 0).to_owned())
    }

    /// Forward pass for a batch of inputs (rows) sharing one mask.
    pub fn forward_batch(
        &self,
        inputs: ArrayView2<'_, f64>,
        mask: Option<&DropoutMask>,
    ) -> Result<Array2<f64>, NnError> {
        self.check_mask(mask)?;
        let mut h = inputs.to_owned();
        self.check_input(&h)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weights.t());
            z += &layer.biases;
            z.mapv_inplace(|v| layer.activation.apply(v));
            if let Some(scales) = mask.and_then(|m| m.scales[i].as_ref()) {
                z *= &scales.view().insert_axis(Axis(0));
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass that records intermediates for backpropagation.
    ///
    /// `dropout` selects the mask mode: `None` runs deterministically,
    /// [`TraceDropout::Shared`] applies one mask to every example (a fixed
    /// posterior draw), [`TraceDropout::PerExample`] applies row-wise masks
    /// (training mode).
    pub fn forward_trace(
        &self,
        inputs: ArrayView2<'_, f64>,
        dropout: TraceDropout<'_>,
    ) -> Result<ForwardTrace, NnError> {
        match dropout {
            TraceDropout::None => {}
            TraceDropout::Shared(mask) => self.check_mask(Some(mask))?,
            TraceDropout::PerExample(batch) => {
                if batch.scales.len() != self.layers.len() {
                    return Err(NnError::TraceMismatch);
                }
            }
        }
        let input = inputs.to_owned();
        self.check_input(&input)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut applied = Vec::with_capacity(self.layers.len());
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weights.t());
            z += &layer.biases;
            pre.push(z.clone());
            z.mapv_inplace(|v| layer.activation.apply(v));
            let scale = match &dropout {
                TraceDropout::None => None,
                TraceDropout::Shared(mask) => mask.scales[i].as_ref().map(|s| {
                    let mut m = Array2::zeros((inputs.nrows(), s.len()));
                    m.rows_mut().into_iter().for_each(|mut row| row.assign(s));
                    m
                }),
                TraceDropout::PerExample(batch) => batch.scales[i].clone(),
            };
            if let Some(s) = &scale {
                if s.raw_dim() != z.raw_dim() {
                    return Err(NnError::TraceMismatch);
                }
                z *= s;
            }
            applied.push(scale);
            post.push(z.clone());
            h = z;
        }
        Ok(ForwardTrace { input, pre, post, applied, shape: self.shape_fingerprint() })
    }

    /// Backpropagate `loss_grads` (gradient of a scalar loss w.r.t. the
    /// network outputs, one row per example) through a recorded forward
    /// pass. Returns parameter gradients and the gradient w.r.t. the
    /// batch inputs.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        loss_grads: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>), NnError> {
        if trace.shape != self.shape_fingerprint() {
            return Err(NnError::TraceMismatch);
        }
        if loss_grads.raw_dim() != trace.post.last().expect("nonempty").raw_dim() {
            return Err(NnError::ShapeMismatch {
                context: "backward loss gradient",
                expected: trace.post.last().expect("nonempty").len(),
                got: loss_grads.len(),
            });
        }
        let mut grads = Gradients {
            weights: Vec::with_capacity(self.layers.len()),
            biases: Vec::with_capacity(self.layers.len()),
        };
        let mut g = loss_grads.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(s) = &trace.applied[i] {
                g *= s;
            }
            // d/dz through the activation
            g.zip_mut_with(&trace.pre[i], |gv, &z| *gv *= layer.activation.derivative(z));
            let upstream = if i == 0 { &trace.input } else { &trace.post[i - 1] };
            grads.weights.push(g.t().dot(upstream));
            grads.biases.push(g.sum_axis(Axis(0)));
            g = g.dot(&layer.weights);
        }
        grads.weights.reverse();
        grads.biases.reverse();
        Ok((grads, g))
    }

    fn check_input(&self, inputs: &Array2<f64>) -> Result<(), NnError> {
        let expected = self.input_dim();
        if inputs.ncols() != expected {
            return Err(NnError::ShapeMismatch {
                context: "network input",
                expected,
                got: inputs.ncols(),
            });
        }
        Ok(())
    }

    fn check_mask(&self, mask: Option<&DropoutMask>) -> Result<(), NnError> {
        if let Some(m) = mask {
            if m.scales.len() != self.layers.len() {
                return Err(NnError::TraceMismatch);
            }
            for (layer, scale) in self.layers.iter().zip(&m.scales) {
                match (layer.dropout, scale) {
                    (true, Some(s)) if s.len() == layer.out_dim() => {}
                    (false, None) => {}
                    _ => return Err(NnError::TraceMismatch),
                }
            }
        }
        Ok(())
    }
}

/// Dropout mode for a traced (trainable) forward pass.
#[derive(Debug, Clone, Copy)]
pub enum TraceDropout<'a> {
    None,
    Shared(&'a DropoutMask),
    PerExample(&'a BatchDropout),
}
