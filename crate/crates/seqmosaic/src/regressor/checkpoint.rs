//! Binary checkpoint format.
//!
//! Layout: magic `HHEN`, u32 version, model geometry and hyperparameter
//! snapshot, an architecture descriptor (tensor count, then rank and extents
//! per tensor as u32), then every parameter as little-endian f64 in
//! declaration order. Loading validates magic, version and every shape, and
//! never returns a partially filled model.

use std::path::Path;

use super::{ConvLayer, FcLayer, RegressorModel, TrainConfig, CONV_CHANNELS, EMBED_CHANNELS, FC_HIDDEN, OUTPUT_DIM};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::fusion::{FusionHead, Neighborhood};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HHEN";
pub const VERSION: u32 = 1;

/// Serialize a model to bytes.
pub fn to_bytes(model: &RegressorModel) -> Vec<u8> {
    let tensors = tensor_views(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, model.patch() as u32);
    push_u32(&mut out, model.key_offset() as u32);
    push_u32(&mut out, match model.fusion_head().neighborhood() {
        Neighborhood::EightNeighbor => 0,
        Neighborhood::AllPositions => 1,
    });
    let h = model.hyper();
    out.extend_from_slice(&h.lr.to_le_bytes());
    out.extend_from_slice(&h.momentum.to_le_bytes());
    push_u32(&mut out, h.batch as u32);
    push_u32(&mut out, h.epochs as u32);
    out.extend_from_slice(&h.seed.to_le_bytes());
    push_u32(&mut out, h.patch as u32);
    push_u32(&mut out, h.key_offset as u32);

    push_u32(&mut out, tensors.len() as u32);
    for (shape, _) in &tensors {
        push_u32(&mut out, shape.len() as u32);
        for &d in shape {
            push_u32(&mut out, d as u32);
        }
    }
    for (_, data) in &tensors {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Write a checkpoint atomically.
pub fn save(model: &RegressorModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(model))
}

/// Deserialize a model from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<RegressorModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, this build reads version {VERSION}"
        )));
    }
    let patch = cur.u32()? as usize;
    let key_offset = cur.u32()? as usize;
    let neighborhood = match cur.u32()? {
        0 => Neighborhood::EightNeighbor,
        1 => Neighborhood::AllPositions,
        n => return Err(Error::Format(format!("unknown neighborhood tag {n}"))),
    };
    let hyper = TrainConfig {
        lr: cur.f64()?,
        momentum: cur.f64()?,
        batch: cur.u32()? as usize,
        epochs: cur.u32()? as usize,
        seed: cur.u64()?,
        patch: cur.u32()? as usize,
        key_offset: cur.u32()? as usize,
        max_iters: None,
    };

    let count = cur.u32()? as usize;
    let expected = expected_shapes(patch)?;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {count} tensors, architecture has {}",
            expected.len()
        )));
    }
    let mut shapes = Vec::with_capacity(count);
    for exp in &expected {
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        if &shape != exp {
            return Err(Error::Format(format!(
                "checkpoint tensor shape {shape:?} does not match architecture {exp:?}"
            )));
        }
        shapes.push(shape);
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in &shapes {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cur.f64()?);
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cur.pos
        )));
    }

    let mut it = tensors.into_iter();
    let mut conv = Vec::with_capacity(4);
    for _ in 0..4 {
        let weight = it.next().unwrap();
        let bias = it.next().unwrap().data().to_vec();
        conv.push(ConvLayer { weight, bias });
    }
    let fusion = FusionHead::new(it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), neighborhood)?;
    let fc1 = FcLayer {
        weight: it.next().unwrap(),
        bias: it.next().unwrap().data().to_vec(),
    };
    let fc2 = FcLayer {
        weight: it.next().unwrap(),
        bias: it.next().unwrap().data().to_vec(),
    };
    Ok(RegressorModel::from_parts(conv, fusion, fc1, fc2, patch, key_offset, hyper))
}

/// Read a checkpoint file.
pub fn load(path: impl AsRef<Path>) -> Result<RegressorModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn tensor_views(model: &RegressorModel) -> Vec<(Vec<usize>, &[f64])> {
    let mut out: Vec<(Vec<usize>, &[f64])> = Vec::with_capacity(15);
    for layer in model.conv_layers() {
        out.push((layer.weight.shape().to_vec(), layer.weight.data()));
        out.push((vec![layer.bias.len()], &layer.bias));
    }
    let head = model.fusion_head();
    out.push((head.w_theta().shape().to_vec(), head.w_theta().data()));
    out.push((head.w_phi().shape().to_vec(), head.w_phi().data()));
    out.push((head.w_g().shape().to_vec(), head.w_g().data()));
    out.push((model.fc1().weight.shape().to_vec(), model.fc1().weight.data()));
    out.push((vec![model.fc1().bias.len()], &model.fc1().bias));
    out.push((model.fc2().weight.shape().to_vec(), model.fc2().weight.data()));
    out.push((vec![model.fc2().bias.len()], &model.fc2().bias));
    out
}

fn expected_shapes(patch: usize) -> Result<Vec<Vec<usize>>> {
    if patch < 8 || patch % 4 != 0 {
        return Err(Error::Format(format!("checkpoint declares invalid patch {patch}")));
    }
    let mut shapes = Vec::new();
    let mut in_ch = 1;
    for out_ch in CONV_CHANNELS {
        shapes.push(vec![out_ch, in_ch, 3, 3]);
        shapes.push(vec![out_ch]);
        in_ch = out_ch;
    }
    let deep = CONV_CHANNELS[3];
    shapes.push(vec![EMBED_CHANNELS, deep]);
    shapes.push(vec![EMBED_CHANNELS, deep]);
    shapes.push(vec![deep, deep]);
    shapes.push(vec![FC_HIDDEN, super::head_input_len(patch)]);
    shapes.push(vec![FC_HIDDEN]);
    shapes.push(vec![OUTPUT_DIM, FC_HIDDEN]);
    shapes.push(vec![OUTPUT_DIM]);
    Ok(shapes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
