//! Batched forward and reverse passes over a [`LayeredModel`].
//!
//! Activations are stored batch-major; a conv or batch-norm layer sees each
//! sample as `channels × length` in row-major order.

use super::model::{Activation, Gradient, Layer, LayerOp, LayeredModel, ParamGrad};
use crate::{Error, Result};

/// How batch-norm layers normalise during a traced pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Every batch-norm layer uses running statistics.
    Inference,
    /// Every batch-norm layer uses batch statistics.
    Training,
    /// Layers below the index use running statistics (frozen), the rest
    /// use batch statistics.
    FrozenBelow(usize),
}

impl NormMode {
    fn batch_stats(self, layer: usize) -> bool {
        match self {
            NormMode::Inference => false,
            NormMode::Training => true,
            NormMode::FrozenBelow(split) => layer >= split,
        }
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    batch_stats: bool,
    /// Normalised input.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    norms: Vec<Option<NormCache>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn dense_forward(
    layer: &Layer,
    inputs: usize,
    outputs: usize,
    x: &[f64],
    batch: usize,
) -> Vec<f64> {
    let mut z = vec![0.0; batch * outputs];
    for b in 0..batch {
        let xb = &x[b * inputs..(b + 1) * inputs];
        let zb = &mut z[b * outputs..(b + 1) * outputs];
        for (o, zo) in zb.iter_mut().enumerate() {
            let w = &layer.weights[o * inputs..(o + 1) * inputs];
            *zo = layer.biases[o] + w.iter().zip(xb).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    z
}

fn conv_forward(
    layer: &Layer,
    dims: (usize, usize, usize, usize),
    x: &[f64],
    batch: usize,
) -> Vec<f64> {
    let (cin, cout, k, len) = dims;
    let pad = k / 2;
    let mut z = vec![0.0; batch * cout * len];
    for b in 0..batch {
        let xb = &x[b * cin * len..(b + 1) * cin * len];
        for o in 0..cout {
            let zo = &mut z[(b * cout + o) * len..(b * cout + o + 1) * len];
            zo.iter_mut().for_each(|v| *v = layer.biases[o]);
            for i in 0..cin {
                let xi = &xb[i * len..(i + 1) * len];
                for kk in 0..k {
                    let w = layer.weights[(o * cin + i) * k + kk];
                    // output t reads input t + kk - pad
                    let lo = pad.saturating_sub(kk);
                    let hi = (len + pad).saturating_sub(kk).min(len);
                    for t in lo..hi {
                        zo[t] += w * xi[t + kk - pad];
                    }
                }
            }
        }
    }
    z
}

fn norm_forward(
    layer: &Layer,
    channels: usize,
    len: usize,
    x: &[f64],
    batch: usize,
    batch_stats: bool,
) -> (Vec<f64>, NormCache) {
    let stats = layer.norm_stats().expect("batch-norm layer");
    let count = batch * len;
    let (mean, var) = if batch_stats {
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for c in 0..channels {
            let mut s = 0.0;
            for b in 0..batch {
                s += x[(b * channels + c) * len..(b * channels + c + 1) * len]
                    .iter()
                    .sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for b in 0..batch {
                v += x[(b * channels + c) * len..(b * channels + c + 1) * len]
                    .iter()
                    .map(|xv| (xv - m) * (xv - m))
                    .sum::<f64>();
            }
            mean[c] = m;
            var[c] = v / count as f64;
        }
        (mean, var)
    } else {
        (stats.running_mean.clone(), stats.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut z = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * len;
            for t in 0..len {
                let h = (x[base + t] - mean[c]) * inv_std[c];
                xhat[base + t] = h;
                z[base + t] = layer.weights[c] * h + layer.biases[c];
            }
        }
    }
    (
        z,
        NormCache {
            batch_stats,
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    )
}

/// Traced forward pass over a batch of flattened inputs.
pub fn forward_trace(
    model: &LayeredModel,
    inputs: &[f64],
    batch: usize,
    mode: NormMode,
) -> Result<Trace> {
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    if inputs.len() != batch * model.input_size() {
        return Err(Error::shape(
            "forward",
            batch * model.input_size(),
            inputs.len(),
        ));
    }
    let n = model.layers().len();
    let mut trace = Trace {
        batch,
        inputs: Vec::with_capacity(n),
        pre: Vec::with_capacity(n),
        norms: Vec::with_capacity(n),
        output: Vec::new(),
    };
    let mut x = inputs.to_vec();
    for (idx, layer) in model.layers().iter().enumerate() {
        let (z, cache) = match &layer.op {
            LayerOp::Dense { inputs, outputs } => {
                (dense_forward(layer, *inputs, *outputs, &x, batch), None)
            }
            LayerOp::Conv1d {
                in_channels,
                out_channels,
                kernel,
                length,
            } => (
                conv_forward(
                    layer,
                    (*in_channels, *out_channels, *kernel, *length),
                    &x,
                    batch,
                ),
                None,
            ),
            LayerOp::BatchNorm {
                channels, length, ..
            } => {
                let (z, c) =
                    norm_forward(layer, *channels, *length, &x, batch, mode.batch_stats(idx));
                (z, Some(c))
            }
        };
        let out: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
        trace.inputs.push(std::mem::replace(&mut x, out));
        trace.pre.push(z);
        trace.norms.push(cache);
    }
    trace.output = x;
    Ok(trace)
}

/// Inference forward pass (running batch-norm statistics).
pub fn forward(model: &LayeredModel, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
    Ok(forward_trace(model, inputs, batch, NormMode::Inference)?.output)
}

/// Reverse pass. Given `d_output = ∂L/∂output`, returns the parameter
/// gradient and `∂L/∂input`.
pub fn backprop(
    model: &LayeredModel,
    trace: &Trace,
    d_output: &[f64],
) -> Result<(Gradient, Vec<f64>)> {
    if d_output.len() != trace.output.len() {
        return Err(Error::shape("backprop", trace.output.len(), d_output.len()));
    }
    let batch = trace.batch;
    let mut grad = Gradient::zeros_for(model);
    let mut delta = d_output.to_vec();
    for (idx, layer) in model.layers().iter().enumerate().rev() {
        let pre = &trace.pre[idx];
        if layer.activation != Activation::Identity {
            for (d, &z) in delta.iter_mut().zip(pre) {
                *d *= layer.activation.derivative(z);
            }
        }
        let x = &trace.inputs[idx];
        let g = &mut grad.layers[idx];
        let mut dx = vec![0.0; x.len()];
        match &layer.op {
            LayerOp::Dense { inputs, outputs } => {
                dense_backward(layer, g, (*inputs, *outputs), x, &delta, &mut dx, batch)
            }
            LayerOp::Conv1d {
                in_channels,
                out_channels,
                kernel,
                length,
            } => conv_backward(
                layer,
                g,
                (*in_channels, *out_channels, *kernel, *length),
                x,
                &delta,
                &mut dx,
                batch,
            ),
            LayerOp::BatchNorm {
                channels, length, ..
            } => {
                let cache = trace.norms[idx].as_ref().expect("batch-norm cache");
                norm_backward(
                    layer,
                    g,
                    (*channels, *length),
                    cache,
                    &delta,
                    &mut dx,
                    batch,
                )
            }
        }
        delta = dx;
    }
    Ok((grad, delta))
}

fn dense_backward(
    layer: &Layer,
    g: &mut ParamGrad,
    (inputs, outputs): (usize, usize),
    x: &[f64],
    dz: &[f64],
    dx: &mut [f64],
    batch: usize,
) {
    for b in 0..batch {
        let xb = &x[b * inputs..(b + 1) * inputs];
        let dxb = &mut dx[b * inputs..(b + 1) * inputs];
        for o in 0..outputs {
            let d = dz[b * outputs + o];
            if d == 0.0 {
                continue;
            }
            g.biases[o] += d;
            let gw = &mut g.weights[o * inputs..(o + 1) * inputs];
            let w = &layer.weights[o * inputs..(o + 1) * inputs];
            for i in 0..inputs {
                gw[i] += d * xb[i];
                dxb[i] += d * w[i];
            }
        }
    }
}

fn conv_backward(
    layer: &Layer,
    g: &mut ParamGrad,
    (cin, cout, k, len): (usize, usize, usize, usize),
    x: &[f64],
    dz: &[f64],
    dx: &mut [f64],
    batch: usize,
) {
    let pad = k / 2;
    for b in 0..batch {
        let xb = &x[b * cin * len..(b + 1) * cin * len];
        let dxb = &mut dx[b * cin * len..(b + 1) * cin * len];
        for o in 0..cout {
            let dzo = &dz[(b * cout + o) * len..(b * cout + o + 1) * len];
            g.biases[o] += dzo.iter().sum::<f64>();
            for i in 0..cin {
                let xi = &xb[i * len..(i + 1) * len];
                for kk in 0..k {
                    let widx = (o * cin + i) * k + kk;
                    let w = layer.weights[widx];
                    let lo = pad.saturating_sub(kk);
                    let hi = (len + pad).saturating_sub(kk).min(len);
                    let mut gw = 0.0;
                    for t in lo..hi {
                        let src = i * len + t + kk - pad;
                        gw += dzo[t] * xi[t + kk - pad];
                        dxb[src] += w * dzo[t];
                    }
                    g.weights[widx] += gw;
                }
            }
        }
    }
}

fn norm_backward(
    layer: &Layer,
    g: &mut ParamGrad,
    (channels, len): (usize, usize),
    cache: &NormCache,
    dz: &[f64],
    dx: &mut [f64],
    batch: usize,
) {
    let n = cache.count as f64;
    for c in 0..channels {
        let gamma = layer.weights[c];
        let mut sum_dz = 0.0;
        let mut sum_dz_xhat = 0.0;
        for b in 0..batch {
            let base = (b * channels + c) * len;
            for t in 0..len {
                sum_dz += dz[base + t];
                sum_dz_xhat += dz[base + t] * cache.xhat[base + t];
            }
        }
        g.biases[c] += sum_dz;
        g.weights[c] += sum_dz_xhat;
        let inv = cache.inv_std[c];
        for b in 0..batch {
            let base = (b * channels + c) * len;
            for t in 0..len {
                dx[base + t] = if cache.batch_stats {
                    gamma * inv / n
                        * (n * dz[base + t] - sum_dz - cache.xhat[base + t] * sum_dz_xhat)
                } else {
                    gamma * inv * dz[base + t]
                };
            }
        }
    }
}

/// Folds the batch statistics recorded in `trace` into each batch-norm
/// layer's running averages.
pub fn update_running_stats(model: &mut LayeredModel, trace: &Trace) {
    for (layer, cache) in model.layers_mut().iter_mut().zip(&trace.norms) {
        let (Some(stats), Some(cache)) = (layer.norm_stats_mut(), cache.as_ref()) else {
            continue;
        };
        if !cache.batch_stats {
            continue;
        }
        let m = stats.momentum;
        let unbias = if cache.count > 1 {
            cache.count as f64 / (cache.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..stats.running_mean.len() {
            stats.running_mean[c] = (1.0 - m) * stats.running_mean[c] + m * cache.mean[c];
            stats.running_var[c] = (1.0 - m) * stats.running_var[c] + m * cache.var[c] * unbias;
        }
    }
}
