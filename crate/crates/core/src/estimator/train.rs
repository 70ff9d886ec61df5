use rand::seq::SliceRandom;

use super::engine::{backprop, forward, forward_trace, update_running_stats, NormMode, Trace};
use super::model::{Gradient, LayeredModel};
use crate::channel::PilotDataset;
use crate::seed::{rng_for, stream};
use crate::{Error, Result};

/// Real-valued inputs (`batch × 2 × pilot_length`, real then imaginary
/// feature map) and targets (`batch × 2·N·M`, real block then imaginary block).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub batch: usize,
}

impl TrainBatch {
    pub fn new(inputs: Vec<f64>, targets: Vec<f64>, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        if inputs.len() % batch != 0 || targets.len() % batch != 0 {
            return Err(Error::shape(
                "TrainBatch::new",
                format!("multiples of {batch}"),
                inputs.len(),
            ));
        }
        Ok(Self {
            inputs,
            targets,
            batch,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.len() / self.batch
    }

    pub fn target_dim(&self) -> usize {
        self.targets.len() / self.batch
    }

    /// The same samples listed twice.
    pub fn duplicated(&self) -> TrainBatch {
        TrainBatch {
            inputs: [self.inputs.as_slice(), self.inputs.as_slice()].concat(),
            targets: [self.targets.as_slice(), self.targets.as_slice()].concat(),
            batch: 2 * self.batch,
        }
    }
}

/// A dataset flattened once into estimator-ready tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    input_dim: usize,
    target_dim: usize,
    len: usize,
}

impl TrainSet {
    pub fn from_dataset(ds: &PilotDataset) -> Self {
        let p = ds.pilot_length;
        let nm = ds.ris_elements * ds.stacked_antennas;
        let mut inputs = Vec::with_capacity(ds.len() * 2 * p);
        let mut targets = Vec::with_capacity(ds.len() * 2 * nm);
        for s in &ds.samples {
            inputs.extend(s.received.iter().map(|z| z.re));
            inputs.extend(s.received.iter().map(|z| z.im));
            targets.extend(s.truth.as_slice().iter().map(|z| z.re));
            targets.extend(s.truth.as_slice().iter().map(|z| z.im));
        }
        Self {
            inputs,
            targets,
            input_dim: 2 * p,
            target_dim: 2 * nm,
            len: ds.len(),
        }
    }

    pub fn from_batch(batch: &TrainBatch) -> Self {
        Self {
            inputs: batch.inputs.clone(),
            targets: batch.targets.clone(),
            input_dim: batch.input_dim(),
            target_dim: batch.target_dim(),
            len: batch.batch,
        }
    }

    pub fn empty(input_dim: usize, target_dim: usize) -> Self {
        Self {
            inputs: Vec::new(),
            targets: Vec::new(),
            input_dim,
            target_dim,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn full(&self) -> Result<TrainBatch> {
        TrainBatch::new(self.inputs.clone(), self.targets.clone(), self.len)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<TrainBatch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut targets = Vec::with_capacity(indices.len() * self.target_dim);
        for &i in indices {
            if i >= self.len {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} out of range {}",
                    self.len
                )));
            }
            inputs.extend_from_slice(&self.inputs[i * self.input_dim..(i + 1) * self.input_dim]);
            targets
                .extend_from_slice(&self.targets[i * self.target_dim..(i + 1) * self.target_dim]);
        }
        TrainBatch::new(inputs, targets, indices.len())
    }

    /// Copy with targets replaced, e.g. by a teacher's outputs.
    pub fn with_targets(&self, targets: Vec<f64>) -> Result<Self> {
        if targets.len() % self.len.max(1) != 0 {
            return Err(Error::shape(
                "TrainSet::with_targets",
                self.len,
                targets.len(),
            ));
        }
        Ok(Self {
            target_dim: targets.len() / self.len.max(1),
            targets,
            inputs: self.inputs.clone(),
            input_dim: self.input_dim,
            len: self.len,
        })
    }

    /// Concatenation of several sets with matching dimensions.
    pub fn concat(sets: &[&TrainSet]) -> Result<Self> {
        let first = sets.first().ok_or(Error::EmptyBatch)?;
        let mut out = TrainSet {
            inputs: Vec::new(),
            targets: Vec::new(),
            input_dim: first.input_dim,
            target_dim: first.target_dim,
            len: 0,
        };
        for s in sets {
            if s.input_dim != out.input_dim || s.target_dim != out.target_dim {
                return Err(Error::shape("TrainSet::concat", out.input_dim, s.input_dim));
            }
            out.inputs.extend_from_slice(&s.inputs);
            out.targets.extend_from_slice(&s.targets);
            out.len += s.len;
        }
        Ok(out)
    }
}

fn check_batch(model: &LayeredModel, batch: &TrainBatch) -> Result<()> {
    if batch.batch == 0 || batch.inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.input_dim() != model.input_size() {
        return Err(Error::shape(
            "estimator input",
            model.input_size(),
            batch.input_dim(),
        ));
    }
    if batch.target_dim() != model.output_size() {
        return Err(Error::shape(
            "estimator target",
            model.output_size(),
            batch.target_dim(),
        ));
    }
    Ok(())
}

fn squared_error(output: &[f64], targets: &[f64], batch: usize) -> f64 {
    output
        .iter()
        .zip(targets)
        .map(|(o, t)| (o - t) * (o - t))
        .sum::<f64>()
        / batch as f64
}

/// `(1/B) Σ ‖f(y) − h‖²` under the given normalisation mode.
pub fn mse_loss_with(model: &LayeredModel, batch: &TrainBatch, mode: NormMode) -> Result<f64> {
    check_batch(model, batch)?;
    let trace = forward_trace(model, &batch.inputs, batch.batch, mode)?;
    Ok(squared_error(trace.output(), &batch.targets, batch.batch))
}

/// Training-mode mean squared error.
pub fn mse_loss(model: &LayeredModel, batch: &TrainBatch) -> Result<f64> {
    mse_loss_with(model, batch, NormMode::Training)
}

/// Loss, exact gradient and forward trace in one pass.
pub fn loss_and_gradient(
    model: &LayeredModel,
    batch: &TrainBatch,
    mode: NormMode,
) -> Result<(f64, Gradient, Trace)> {
    check_batch(model, batch)?;
    let trace = forward_trace(model, &batch.inputs, batch.batch, mode)?;
    let scale = 2.0 / batch.batch as f64;
    let d_out: Vec<f64> = trace
        .output()
        .iter()
        .zip(&batch.targets)
        .map(|(o, t)| scale * (o - t))
        .collect();
    let loss = squared_error(trace.output(), &batch.targets, batch.batch);
    let (grad, _) = backprop(model, &trace, &d_out)?;
    Ok((loss, grad, trace))
}

/// Gradient of [`mse_loss`] at the current parameters.
pub fn backward(model: &LayeredModel, batch: &TrainBatch) -> Result<Gradient> {
    Ok(loss_and_gradient(model, batch, NormMode::Training)?.1)
}

/// In-place `ω ← ω − η g`.
pub fn apply_gradient(model: &mut LayeredModel, grad: &Gradient, learning_rate: f64) -> Result<()> {
    if !grad.is_congruent(model) {
        return Err(Error::shape(
            "sgd_step",
            "gradient congruent with model",
            "different shape",
        ));
    }
    for (layer, g) in model.layers_mut().iter_mut().zip(&grad.layers) {
        for (w, d) in layer.weights.iter_mut().zip(&g.weights) {
            *w -= learning_rate * d;
        }
        for (b, d) in layer.biases.iter_mut().zip(&g.biases) {
            *b -= learning_rate * d;
        }
    }
    Ok(())
}

/// `ω − η g` as a new model.
pub fn sgd_step(model: &LayeredModel, grad: &Gradient, learning_rate: f64) -> Result<LayeredModel> {
    if !(learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    let mut next = model.clone();
    apply_gradient(&mut next, grad, learning_rate)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Minimum neighbor contribution as a fraction of the own dataset size.
    pub neighbor_floor: f64,
    /// Weight on the own-data loss term.
    pub own_weight: f64,
    pub seed: u64,
    /// Layers below this index are neither updated nor re-normalised.
    pub frozen_below: usize,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 1e-3,
            batch_size: 64,
            neighbor_floor: 0.1,
            own_weight: 1.0,
            seed: 0,
            frozen_below: 0,
        }
    }
}

impl LocalTrainConfig {
    /// Smallest neighbor share accepted for an own dataset of `own_len` samples.
    pub fn min_neighbor_samples(&self, own_len: usize) -> usize {
        (self.neighbor_floor * own_len as f64 - 1e-9)
            .ceil()
            .max(0.0) as usize
    }
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
    full: bool,
}

impl Cursor {
    fn new(len: usize, batch: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: 0,
            full: batch >= len,
        }
    }

    fn reshuffle(&mut self, rng: &mut crate::seed::Rng) {
        if !self.full {
            self.order.shuffle(rng);
        }
        self.pos = 0;
    }

    fn next(&mut self, batch: usize, rng: &mut crate::seed::Rng) -> Vec<usize> {
        if self.full {
            return self.order.clone();
        }
        if self.pos + batch > self.order.len() {
            self.reshuffle(rng);
        }
        let out = self.order[self.pos..self.pos + batch].to_vec();
        self.pos += batch;
        out
    }
}

/// Mini-batch SGD on the own-data loss plus one loss term per neighbor
/// dataset. Each neighbor must contribute at least `neighbor_floor · D_k`
/// samples.
pub fn local_train(
    model: &LayeredModel,
    own: &TrainSet,
    neighbors: &[&TrainSet],
    cfg: &LocalTrainConfig,
) -> Result<LayeredModel> {
    if own.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let floor = cfg.min_neighbor_samples(own.len());
    for (z, n) in neighbors.iter().enumerate() {
        if n.len() < floor {
            return Err(Error::NeighborBelowFloor {
                neighbor: z,
                samples: n.len(),
                required: floor,
            });
        }
    }
    let mode = if cfg.frozen_below > 0 {
        NormMode::FrozenBelow(cfg.frozen_below)
    } else {
        NormMode::Training
    };
    let mut rng = rng_for(cfg.seed, stream::TRAINING, 0);
    let mut model = model.clone();
    let own_batch = cfg.batch_size.min(own.len());
    let steps = own.len().div_ceil(own_batch);
    let mut own_cursor = Cursor::new(own.len(), own_batch);
    let mut cursors: Vec<Cursor> = neighbors
        .iter()
        .map(|n| Cursor::new(n.len(), cfg.batch_size.min(n.len())))
        .collect();
    for _ in 0..cfg.epochs {
        own_cursor.reshuffle(&mut rng);
        for _ in 0..steps {
            let idx = own_cursor.next(own_batch, &mut rng);
            let batch = own.batch(&idx)?;
            let (_, mut grad, trace) = loss_and_gradient(&model, &batch, mode)?;
            if cfg.own_weight != 1.0 {
                grad.scale(cfg.own_weight);
            }
            for (n, cursor) in neighbors.iter().zip(cursors.iter_mut()) {
                let nb = cfg.batch_size.min(n.len());
                let idx = cursor.next(nb, &mut rng);
                let (_, g, _) = loss_and_gradient(&model, &n.batch(&idx)?, mode)?;
                grad.add_scaled(&g, 1.0)?;
            }
            grad.zero_prefix(cfg.frozen_below);
            apply_gradient(&mut model, &grad, cfg.learning_rate)?;
            update_running_stats(&mut model, &trace);
        }
    }
    Ok(model)
}

/// Reported NMSE when the estimate is exact.
pub const NMSE_FLOOR_DB: f64 = -300.0;

/// `‖ĥ − h‖² / ‖h‖²`.
pub fn nmse_linear(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::shape("nmse", truth.len(), estimate.len()));
    }
    let denom: f64 = truth.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let num: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(num / denom)
}

pub fn linear_to_db(x: f64) -> f64 {
    if x <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * x.log10()).max(NMSE_FLOOR_DB)
    }
}

/// NMSE in decibels, floored at [`NMSE_FLOOR_DB`].
pub fn nmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    Ok(linear_to_db(nmse_linear(estimate, truth)?))
}

/// Mean per-sample linear NMSE of `model` over `set` (inference mode).
pub fn evaluate_nmse(model: &LayeredModel, set: &TrainSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    const CHUNK: usize = 256;
    let mut total = 0.0;
    let mut start = 0;
    while start < set.len() {
        let end = (start + CHUNK).min(set.len());
        let idx: Vec<usize> = (start..end).collect();
        let batch = set.batch(&idx)?;
        let out = forward(model, &batch.inputs, batch.batch)?;
        let d = set.target_dim();
        for b in 0..batch.batch {
            total += nmse_linear(&out[b * d..(b + 1) * d], &batch.targets[b * d..(b + 1) * d])?;
        }
        start = end;
    }
    Ok(total / set.len() as f64)
}
