use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Per-channel batch-normalisation state that is not trained by gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    /// `weights` is `outputs × inputs` row-major.
    Dense { inputs: usize, outputs: usize },
    /// Stride 1, zero "same" padding, odd kernel. `weights` is
    /// `out_channels × in_channels × kernel`.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        length: usize,
    },
    /// `weights` holds the per-channel scale, `biases` the shift.
    BatchNorm {
        channels: usize,
        length: usize,
        stats: NormStats,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv1d,
    BatchNorm,
}

/// Shape-only description of a layer, used for accounting and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDescriptor {
    pub kind: LayerKind,
    pub activation: Activation,
    /// `[inputs, outputs, 0, 0]` for dense, `[in_ch, out_ch, kernel, length]`
    /// for conv, `[channels, length, 0, 0]` for batch norm.
    pub dims: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub op: LayerOp,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize, count: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count)
        .map(|_| rng.random_range(-limit..=limit))
        .collect()
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        Self {
            op: LayerOp::Dense { inputs, outputs },
            weights: glorot(rng, inputs, outputs, inputs * outputs),
            biases: vec![0.0; outputs],
            activation,
        }
    }

    pub fn conv1d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        length: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv kernel must be odd, got {kernel}"
            )));
        }
        Ok(Self {
            op: LayerOp::Conv1d {
                in_channels,
                out_channels,
                kernel,
                length,
            },
            weights: glorot(
                rng,
                in_channels * kernel,
                out_channels * kernel,
                out_channels * in_channels * kernel,
            ),
            biases: vec![0.0; out_channels],
            activation,
        })
    }

    pub fn batch_norm(channels: usize, length: usize, activation: Activation) -> Self {
        Self {
            op: LayerOp::BatchNorm {
                channels,
                length,
                stats: NormStats {
                    running_mean: vec![0.0; channels],
                    running_var: vec![1.0; channels],
                    momentum: 0.1,
                    eps: 1e-5,
                },
            },
            weights: vec![1.0; channels],
            biases: vec![0.0; channels],
            activation,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            LayerOp::Dense { .. } => LayerKind::Dense,
            LayerOp::Conv1d { .. } => LayerKind::Conv1d,
            LayerOp::BatchNorm { .. } => LayerKind::BatchNorm,
        }
    }

    pub fn input_size(&self) -> usize {
        match &self.op {
            LayerOp::Dense { inputs, .. } => *inputs,
            LayerOp::Conv1d {
                in_channels,
                length,
                ..
            } => in_channels * length,
            LayerOp::BatchNorm {
                channels, length, ..
            } => channels * length,
        }
    }

    pub fn output_size(&self) -> usize {
        match &self.op {
            LayerOp::Dense { outputs, .. } => *outputs,
            LayerOp::Conv1d {
                out_channels,
                length,
                ..
            } => out_channels * length,
            LayerOp::BatchNorm {
                channels, length, ..
            } => channels * length,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn descriptor(&self) -> LayerDescriptor {
        let dims = match &self.op {
            LayerOp::Dense { inputs, outputs } => [*inputs, *outputs, 0, 0],
            LayerOp::Conv1d {
                in_channels,
                out_channels,
                kernel,
                length,
            } => [*in_channels, *out_channels, *kernel, *length],
            LayerOp::BatchNorm {
                channels, length, ..
            } => [*channels, *length, 0, 0],
        };
        LayerDescriptor {
            kind: self.kind(),
            activation: self.activation,
            dims,
        }
    }

    fn expected_param_lens(&self) -> (usize, usize) {
        match &self.op {
            LayerOp::Dense { inputs, outputs } => (inputs * outputs, *outputs),
            LayerOp::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels * in_channels * kernel, *out_channels),
            LayerOp::BatchNorm { channels, .. } => (*channels, *channels),
        }
    }

    /// Same op, dimensions and activation; parameters may differ.
    pub fn same_structure(&self, other: &Layer) -> bool {
        self.descriptor() == other.descriptor()
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        match &self.op {
            LayerOp::BatchNorm { stats, .. } => Some(stats),
            _ => None,
        }
    }

    pub fn norm_stats_mut(&mut self) -> Option<&mut NormStats> {
        match &mut self.op {
            LayerOp::BatchNorm { stats, .. } => Some(stats),
            _ => None,
        }
    }
}

/// Ordered layers split into a shared prefix `layers[..shared_split]` and a
/// distillation suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    layers: Vec<Layer>,
    shared_split: usize,
}

impl LayeredModel {
    pub fn new(layers: Vec<Layer>, shared_split: usize) -> Result<Self> {
        if shared_split > layers.len() {
            return Err(Error::InvalidArgument(format!(
                "shared split {shared_split} exceeds {} layers",
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            let (w, b) = l.expected_param_lens();
            if l.weights.len() != w || l.biases.len() != b {
                return Err(Error::shape(
                    "LayeredModel::new",
                    format!("layer {i}: {w}+{b} params"),
                    l.param_count(),
                ));
            }
            if let Some(s) = l.norm_stats() {
                if s.running_mean.len() != b || s.running_var.len() != b {
                    return Err(Error::shape("LayeredModel::new", b, s.running_mean.len()));
                }
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_size() != pair[1].input_size() {
                return Err(Error::shape(
                    "LayeredModel::new",
                    format!("layer {} input {}", i + 1, pair[0].output_size()),
                    pair[1].input_size(),
                ));
            }
        }
        Ok(Self {
            layers,
            shared_split,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn shared_split(&self) -> usize {
        self.shared_split
    }

    pub fn shared_layers(&self) -> &[Layer] {
        &self.layers[..self.shared_split]
    }

    pub fn distill_layers(&self) -> &[Layer] {
        &self.layers[self.shared_split..]
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, Layer::input_size)
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_size)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn shared_param_count(&self) -> usize {
        self.shared_layers().iter().map(Layer::param_count).sum()
    }

    pub fn descriptors(&self) -> Vec<LayerDescriptor> {
        self.layers.iter().map(Layer::descriptor).collect()
    }

    /// True when the shared prefixes of both models have identical structure.
    pub fn shared_structure_matches(&self, other: &LayeredModel) -> bool {
        self.shared_split == other.shared_split
            && self
                .shared_layers()
                .iter()
                .zip(other.shared_layers())
                .all(|(a, b)| a.same_structure(b))
    }

    pub fn same_structure(&self, other: &LayeredModel) -> bool {
        self.shared_split == other.shared_split
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_structure(b))
    }

    /// All trainable parameters, layer by layer, weights before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(
                "set_params_flat",
                self.param_count(),
                values.len(),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&values[off..off + nw]);
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&values[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Re-draws the distillation suffix from `rng`, leaving the shared
    /// prefix untouched.
    pub fn reinitialize_distill(&mut self, rng: &mut Rng) {
        for l in &mut self.layers[self.shared_split..] {
            let fresh = match &l.op {
                LayerOp::Dense { inputs, outputs } => {
                    Layer::dense(*inputs, *outputs, l.activation, rng)
                }
                LayerOp::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    length,
                } => Layer::conv1d(
                    *in_channels,
                    *out_channels,
                    *kernel,
                    *length,
                    l.activation,
                    rng,
                )
                .expect("existing conv layer has a valid kernel"),
                LayerOp::BatchNorm {
                    channels, length, ..
                } => Layer::batch_norm(*channels, *length, l.activation),
            };
            *l = fresh;
        }
    }

    /// Multilayer perceptron with `hidden` activation between layers and an
    /// identity output.
    pub fn mlp(sizes: &[usize], hidden: Activation, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "mlp needs at least input and output sizes".into(),
            ));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == sizes.len() {
                    Activation::Identity
                } else {
                    hidden
                };
                Layer::dense(w[0], w[1], act, rng)
            })
            .collect();
        Self::new(layers, 0)
    }
}

/// Convolutional channel-estimator architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub conv_layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub batch_norm: bool,
    /// Number of leading conv blocks in the shared part.
    pub shared_blocks: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::local()
    }
}

impl ModelSpec {
    /// Edge-node model: three conv blocks and a dense head.
    pub fn local() -> Self {
        Self {
            conv_layers: 3,
            channels: 16,
            kernel: 3,
            batch_norm: true,
            shared_blocks: 2,
        }
    }

    /// Server model: five conv blocks and a dense head.
    pub fn global() -> Self {
        Self {
            conv_layers: 5,
            ..Self::local()
        }
    }

    /// A single dense layer from pilots to channel (a learned linear estimator).
    pub fn linear() -> Self {
        Self {
            conv_layers: 0,
            channels: 0,
            kernel: 1,
            batch_norm: false,
            shared_blocks: 0,
        }
    }

    fn layers_per_block(&self) -> usize {
        if self.batch_norm {
            2
        } else {
            1
        }
    }

    /// Builds a model mapping `2 × pilot_length` inputs to `output_dim` outputs.
    pub fn build(
        &self,
        pilot_length: usize,
        output_dim: usize,
        rng: &mut Rng,
    ) -> Result<LayeredModel> {
        if self.shared_blocks > self.conv_layers {
            return Err(Error::InvalidArgument(format!(
                "shared_blocks {} exceeds conv_layers {}",
                self.shared_blocks, self.conv_layers
            )));
        }
        let mut layers = Vec::new();
        let mut in_ch = 2;
        for _ in 0..self.conv_layers {
            if self.batch_norm {
                layers.push(Layer::conv1d(
                    in_ch,
                    self.channels,
                    self.kernel,
                    pilot_length,
                    Activation::Identity,
                    rng,
                )?);
                layers.push(Layer::batch_norm(
                    self.channels,
                    pilot_length,
                    Activation::Relu,
                ));
            } else {
                layers.push(Layer::conv1d(
                    in_ch,
                    self.channels,
                    self.kernel,
                    pilot_length,
                    Activation::Relu,
                    rng,
                )?);
            }
            in_ch = self.channels;
        }
        let mut head = Layer::dense(in_ch * pilot_length, output_dim, Activation::Identity, rng);
        if self.conv_layers == 0 {
            // A bare linear estimator starts from the zero estimate so that
            // gradient descent converges towards the minimum-norm solution.
            head.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        layers.push(head);
        LayeredModel::new(layers, self.shared_blocks * self.layers_per_block())
    }
}

/// Parameter-shaped container for gradients and parameter deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<ParamGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Gradient {
    pub fn zeros_for(model: &LayeredModel) -> Self {
        Self {
            layers: model
                .layers()
                .iter()
                .map(|l| ParamGrad {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn is_congruent(&self, model: &LayeredModel) -> bool {
        self.layers.len() == model.layers().len()
            && self.layers.iter().zip(model.layers()).all(|(g, l)| {
                g.weights.len() == l.weights.len() && g.biases.len() == l.biases.len()
            })
    }

    pub fn same_shape(&self, other: &Gradient) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.len() == b.weights.len() && a.biases.len() == b.biases.len()
            })
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Gradient, s: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "Gradient::add_scaled",
                "congruent gradient",
                "different shape",
            ));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += s * b;
        }
        Ok(())
    }

    /// Zeroes every layer below `split`.
    pub fn zero_prefix(&mut self, split: usize) {
        for l in self.layers.iter_mut().take(split) {
            l.weights.iter_mut().for_each(|v| *v = 0.0);
            l.biases.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}
