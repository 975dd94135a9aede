//! Binary checkpoint format.
//!
//! ```text
//! "RFLW" | version u32 = 1 | tensor_count u32
//! per tensor: name_len u16 | name (UTF-8) | ndim u8 | dims u32 x ndim
//!             | dtype u8 (1 = f64) | row-major f64 payload
//! CRC32 (u32) over every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::model::{BatchNormLayer, DenseLayer, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"RFLW";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn format_err(msg: impl Into<String>) -> LabError {
    LabError::Format(msg.into())
}

struct Writer {
    buf: Vec<u8>,
    count: u32,
}

impl Writer {
    fn tensor(&mut self, name: &str, dims: &[usize], data: &[f64]) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(dims.len() as u8);
        for &d in dims {
            self.buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        self.buf.push(DTYPE_F64);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self.count += 1;
    }
}

/// Serializes a model to checkpoint bytes.
pub fn encode(model: &Model) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::new(),
        count: 0,
    };
    let cfg = &model.config;
    w.tensor("config.bn", &[2], &[cfg.bn_epsilon, cfg.bn_momentum]);
    for (i, (dense, bn)) in model.hidden.iter().zip(&model.norms).enumerate() {
        w.tensor(&format!("hidden.{i}.weight"), &[dense.out_dim, dense.in_dim], &dense.weight);
        w.tensor(&format!("hidden.{i}.bias"), &[dense.out_dim], &dense.bias);
        let width = [bn.width()];
        w.tensor(&format!("bn.{i}.gamma"), &width, &bn.gamma);
        w.tensor(&format!("bn.{i}.beta"), &width, &bn.beta);
        w.tensor(&format!("bn.{i}.running_mean"), &width, &bn.running_mean);
        w.tensor(&format!("bn.{i}.running_var"), &width, &bn.running_var);
        w.tensor(&format!("bn.{i}.epsilon"), &[1], &[bn.epsilon]);
    }
    let c = &model.classifier;
    w.tensor("classifier.weight", &[c.out_dim, c.in_dim], &c.weight);
    w.tensor("classifier.bias", &[c.out_dim], &c.bias);

    let mut out = Vec::with_capacity(w.buf.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&w.count.to_le_bytes());
    out.extend_from_slice(&w.buf);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err("unexpected end of checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

type TensorMap = HashMap<String, (Vec<usize>, Vec<f64>)>;

/// Parses and validates checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 16 {
        return Err(format_err("checkpoint too short"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("bad magic"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(format_err("CRC mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| format_err("tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(format_err(format!("tensor {name}: unsupported dtype {dtype}")));
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err(format!("tensor {name}: dims overflow")))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| format_err("payload overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(format_err(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(format_err("trailing bytes after last tensor"));
    }
    build_model(tensors)
}

fn fetch(t: &mut TensorMap, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
    let (d, data) = t
        .remove(name)
        .ok_or_else(|| format_err(format!("missing tensor {name}")))?;
    if d != dims {
        return Err(format_err(format!("tensor {name}: dims {d:?}, expected {dims:?}")));
    }
    Ok(data)
}

fn matrix_dims(t: &TensorMap, name: &str) -> Result<(usize, usize)> {
    match t.get(name).map(|(d, _)| d.as_slice()) {
        Some([o, i]) => Ok((*o, *i)),
        Some(d) => Err(format_err(format!("tensor {name}: expected a matrix, got {d:?}"))),
        None => Err(format_err(format!("missing tensor {name}"))),
    }
}

fn build_model(mut t: TensorMap) -> Result<Model> {
    let bn_cfg = fetch(&mut t, "config.bn", &[2])?;
    let mut depth = 0;
    while t.contains_key(&format!("hidden.{depth}.weight")) {
        depth += 1;
    }
    if depth == 0 {
        return Err(format_err("checkpoint has no hidden blocks"));
    }
    let (width, input_dim) = matrix_dims(&t, "hidden.0.weight")?;
    let (num_classes, _) = matrix_dims(&t, "classifier.weight")?;
    let mut hidden = Vec::with_capacity(depth);
    let mut norms = Vec::with_capacity(depth);
    let mut in_dim = input_dim;
    for i in 0..depth {
        let weight = fetch(&mut t, &format!("hidden.{i}.weight"), &[width, in_dim])?;
        let bias = fetch(&mut t, &format!("hidden.{i}.bias"), &[width])?;
        hidden.push(DenseLayer {
            in_dim,
            out_dim: width,
            weight,
            bias,
        });
        let w = [width];
        norms.push(BatchNormLayer {
            gamma: fetch(&mut t, &format!("bn.{i}.gamma"), &w)?,
            beta: fetch(&mut t, &format!("bn.{i}.beta"), &w)?,
            running_mean: fetch(&mut t, &format!("bn.{i}.running_mean"), &w)?,
            running_var: fetch(&mut t, &format!("bn.{i}.running_var"), &w)?,
            epsilon: fetch(&mut t, &format!("bn.{i}.epsilon"), &[1])?[0],
        });
        in_dim = width;
    }
    let classifier = DenseLayer {
        in_dim: width,
        out_dim: num_classes,
        weight: fetch(&mut t, "classifier.weight", &[num_classes, width])?,
        bias: fetch(&mut t, "classifier.bias", &[num_classes])?,
    };
    if let Some(name) = t.keys().next() {
        return Err(format_err(format!("unexpected tensor {name}")));
    }
    let config = ModelConfig {
        input_dim,
        width,
        depth,
        num_classes,
        bn_epsilon: bn_cfg[0],
        bn_momentum: bn_cfg[1],
    };
    config.validate().map_err(|e| format_err(e.to_string()))?;
    if norms.iter().any(|bn| bn.running_var.iter().any(|&v| v < 0.0)) {
        return Err(format_err("negative running variance"));
    }
    Ok(Model {
        config,
        hidden,
        norms,
        classifier,
    })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode(&fs::read(path)?)
}
