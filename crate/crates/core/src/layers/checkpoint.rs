//! `IENW` checkpoint codec.
//!
//! ```text
//! "IENW" | u32 version=1 | u32 layer_count
//! per layer:
//!   u8 kind     low nibble: 0 dense, 1 conv, 2 dropout
//!               0x10: relu activation, 0x20: bias present
//!   u8 wrapper  0 plain, 1 ien, 2 maxout (dropout: 0 paper, 1 inverted)
//!   u32 m | u32 rank | u32 extents[rank]
//!   conv only: u32 stride | u32 pad
//!   m payloads of f64: replica weights, then fan_out biases if flagged
//!   (dropout: rank 0, one payload holding the keep probability)
//! ```
//! Integers and floats are little-endian.

use alloc::format;
use alloc::vec::Vec;

use super::model::{Layer, Model, WeightedLayer};
use super::{ActivationKind, DropoutMode, DropoutSpec, LayerKind, LayerSpec, Wrapper};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IENW";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_DENSE: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_DROPOUT: u8 = 2;
const FLAG_RELU: u8 = 0x10;
const FLAG_BIAS: u8 = 0x20;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    put_u32(&mut out, model.layers().len());
    for layer in model.layers() {
        match layer {
            Layer::Dropout(d) => {
                out.push(KIND_DROPOUT);
                out.push(match d.mode {
                    DropoutMode::Paper => 0,
                    DropoutMode::Inverted => 1,
                });
                put_u32(&mut out, 1);
                put_u32(&mut out, 0);
                put_f64s(&mut out, &[d.p]);
            }
            Layer::Weighted(w) => {
                let spec = &w.spec;
                let mut kind = match spec.kind {
                    LayerKind::Dense => KIND_DENSE,
                    LayerKind::Conv(_) => KIND_CONV,
                };
                if spec.activation == ActivationKind::Relu {
                    kind |= FLAG_RELU;
                }
                if spec.bias {
                    kind |= FLAG_BIAS;
                }
                out.push(kind);
                out.push(match spec.wrapper {
                    Wrapper::Plain => 0,
                    Wrapper::Ien(_) => 1,
                    Wrapper::Maxout(_) => 2,
                });
                put_u32(&mut out, spec.m());
                let shape = spec.weight_shape();
                put_u32(&mut out, shape.len());
                for &e in &shape {
                    put_u32(&mut out, e);
                }
                if let LayerKind::Conv(c) = spec.kind {
                    put_u32(&mut out, c.stride);
                    put_u32(&mut out, c.pad);
                }
                for r in 0..spec.m() {
                    put_f64s(&mut out, w.weights[r].data());
                    if let Some(b) = w.biases.get(r) {
                        put_f64s(&mut out, b.data());
                    }
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("payload too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)
        .map_err(|_| Error::Format("missing magic".into()))?
        != CHECKPOINT_MAGIC
    {
        return Err(Error::Format("bad magic, expected IENW".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()?;
    let mut layers = Vec::new();
    for i in 0..count {
        layers.push(decode_layer(&mut r).map_err(|e| e.in_layer(i))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Model::from_layers(layers)
}

fn decode_layer(r: &mut Reader<'_>) -> Result<Layer> {
    let kind = r.u8()?;
    let wrapper = r.u8()?;
    let m = r.u32()?;
    let rank = r.u32()?;
    if rank > 4 {
        return Err(Error::Format(format!("weight rank {rank} too large")));
    }
    let extents = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let base = kind & 0x0f;
    if base == KIND_DROPOUT {
        if rank != 0 || m != 1 {
            return Err(Error::Format("malformed dropout record".into()));
        }
        let p = r.f64s(1)?[0];
        let mode = match wrapper {
            0 => DropoutMode::Paper,
            1 => DropoutMode::Inverted,
            w => return Err(Error::Format(format!("unknown dropout mode {w}"))),
        };
        return Ok(Layer::Dropout(
            DropoutSpec::new(p, mode).map_err(|e| Error::Format(format!("{e}")))?,
        ));
    }
    if m == 0 {
        return Err(Error::Format("replica count is zero".into()));
    }
    let wrapper = match wrapper {
        0 if m == 1 => Wrapper::Plain,
        1 => Wrapper::Ien(m),
        2 => Wrapper::Maxout(m),
        w => return Err(Error::Format(format!("unknown wrapper {w} with m={m}"))),
    };
    let mut spec = match (base, extents.as_slice()) {
        (KIND_DENSE, &[fan_out, fan_in]) => LayerSpec::dense(fan_in, fan_out),
        (KIND_CONV, &[c_out, c_in, kh, kw]) => {
            let stride = r.u32()?;
            let pad = r.u32()?;
            LayerSpec::conv(c_in, c_out, kh, kw, stride, pad)
        }
        _ => {
            return Err(Error::Format(format!(
                "unknown layer kind {kind:#x} with extents {extents:?}"
            )))
        }
    }
    .wrapped(wrapper);
    if kind & FLAG_RELU != 0 {
        spec = spec.relu();
    }
    if kind & FLAG_BIAS != 0 {
        spec = spec.with_bias();
    }
    spec.validate().map_err(|e| Error::Format(format!("{e}")))?;
    let shape = spec.weight_shape();
    let len: usize = shape.iter().product();
    let mut weights = Vec::with_capacity(m);
    let mut biases = Vec::new();
    for _ in 0..m {
        weights.push(Tensor::new(&shape, r.f64s(len)?)?);
        if spec.bias {
            biases.push(Tensor::new(&[spec.fan_out], r.f64s(spec.fan_out)?)?);
        }
    }
    Ok(Layer::Weighted(WeightedLayer {
        spec,
        weights,
        biases,
    }))
}
