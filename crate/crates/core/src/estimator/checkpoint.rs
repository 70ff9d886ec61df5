//! Versioned binary model checkpoints.
//!
//! ```text
//! magic "CFFLMODL" | version u32 | layer count u32 | shared split u32
//! per layer:
//!   kind u8 (0 dense, 1 conv1d, 2 batch norm) | activation u8 (0 identity, 1 relu)
//!   dims 4 × u32 | weight count u64 | weights f64… | bias count u64 | biases f64…
//!   batch norm only: momentum f64 | eps f64 | running mean f64… | running var f64…
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::model::{Activation, Layer, LayerKind, LayerOp, LayeredModel, NormStats};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CFFLMODL";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(model: &LayeredModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, model.layers().len());
    put_u32(&mut buf, model.shared_split());
    for layer in model.layers() {
        let d = layer.descriptor();
        buf.push(match d.kind {
            LayerKind::Dense => 0,
            LayerKind::Conv1d => 1,
            LayerKind::BatchNorm => 2,
        });
        buf.push(match d.activation {
            Activation::Identity => 0,
            Activation::Relu => 1,
        });
        for dim in d.dims {
            put_u32(&mut buf, dim);
        }
        buf.extend_from_slice(&(layer.weights.len() as u64).to_le_bytes());
        put_f64s(&mut buf, &layer.weights);
        buf.extend_from_slice(&(layer.biases.len() as u64).to_le_bytes());
        put_f64s(&mut buf, &layer.biases);
        if let Some(s) = layer.norm_stats() {
            put_f64s(&mut buf, &[s.momentum, s.eps]);
            put_f64s(&mut buf, &s.running_mean);
            put_f64s(&mut buf, &s.running_var);
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<LayeredModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()?;
    let split = r.u32()?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = r.u8()?;
        let activation = match r.u8()? {
            0 => Activation::Identity,
            1 => Activation::Relu,
            a => return Err(Error::Format(format!("unknown activation tag {a}"))),
        };
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let nw = r.u64()?;
        let weights = r.f64s(nw)?;
        let nb = r.u64()?;
        let biases = r.f64s(nb)?;
        let op = match kind {
            0 => LayerOp::Dense {
                inputs: dims[0],
                outputs: dims[1],
            },
            1 => LayerOp::Conv1d {
                in_channels: dims[0],
                out_channels: dims[1],
                kernel: dims[2],
                length: dims[3],
            },
            2 => {
                let head = r.f64s(2)?;
                let running_mean = r.f64s(dims[0])?;
                let running_var = r.f64s(dims[0])?;
                LayerOp::BatchNorm {
                    channels: dims[0],
                    length: dims[1],
                    stats: NormStats {
                        running_mean,
                        running_var,
                        momentum: head[0],
                        eps: head[1],
                    },
                }
            }
            k => return Err(Error::Format(format!("unknown layer kind {k}"))),
        };
        layers.push(Layer {
            op,
            weights,
            biases,
            activation,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    LayeredModel::new(layers, split)
}

pub fn save_model(model: &LayeredModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<LayeredModel> {
    decode_model(&std::fs::read(path)?)
}
