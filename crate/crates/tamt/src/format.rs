// Copyright 2026 The tamt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Binary checkpoint formats. All integers and floats are little-endian.
//!
//! Weights (`.weights`):
//! ```text
//! magic "TAMTWGT\0"  u32 version
//! u64 layers, heads, hidden, intermediate, vocab, max_len   f64 dropout
//! u32 tensor count, then per tensor:
//!   u16 name length, name (UTF-8), u8 rank, u64 dims…, f64 values…
//! ```
//!
//! Masks (`.mask`):
//! ```text
//! magic "TAMTMSK\0"  u32 version
//! f64 sparsity   u8 method length, method   u64 seed
//! u32 matrix count, then per matrix:
//!   u16 name length, name, u8 rank, u64 dims…, ⌈size/8⌉ bytes (LSB-first)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use tamt_core::{Bitmask, EncoderModel, Method, ModelConfig, SubnetworkCheckpoint, Tensor};

use crate::error::{Error, IoContext, Result};

const WEIGHTS_MAGIC: &[u8; 8] = b"TAMTWGT\0";
const MASK_MAGIC: &[u8; 8] = b"TAMTMSK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn shape(&mut self, shape: &[usize]) {
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u64(d as u64);
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    pub(crate) fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(format!("value {v} exceeds usize")))
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let raw = self.bytes(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("name is not UTF-8"))
    }
    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| self.usize()).collect()
    }

    pub(crate) fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.bytes(8)? != magic {
            return Err(self.err("bad magic"));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).at(&tmp)?;
    f.write_all(bytes).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

fn named_tensors(model: &EncoderModel) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = model.named_weights().map(|(n, t)| (n.to_string(), t)).collect();
    out.extend(model.aux().iter().map(|(n, t)| (n.clone(), t)));
    out.push(("mlm_head.weight".into(), &model.mlm_head().weight));
    out.push(("mlm_head.bias".into(), &model.mlm_head().bias));
    out
}

/// Serializes the weights of `model` (masks and task heads are not stored).
pub fn encode_weights(model: &EncoderModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(WEIGHTS_MAGIC);
    w.u32(FORMAT_VERSION);
    let c = model.config();
    for v in [c.layers, c.heads, c.hidden, c.intermediate, c.vocab, c.max_len] {
        w.u64(v as u64);
    }
    w.f64(c.dropout);
    let tensors = named_tensors(model);
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.name(&name);
        w.shape(t.shape());
        for &x in t.data() {
            w.f64(x);
        }
    }
    w.0
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<EncoderModel> {
    let mut r = Reader::new(bytes, path);
    r.header(WEIGHTS_MAGIC)?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let config = ModelConfig {
        layers: dims[0],
        heads: dims[1],
        hidden: dims[2],
        intermediate: dims[3],
        vocab: dims[4],
        max_len: dims[5],
        dropout: r.f64()?,
    };
    let mut model = EncoderModel::new(config, 0)?;
    let count = r.u32()? as usize;
    let expected = named_tensors(&model).len();
    if count != expected {
        return Err(r.err(format!("{count} tensors, expected {expected}")));
    }
    for _ in 0..count {
        let name = r.name()?;
        let shape = r.shape()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(&shape, data)?;
        let slot = tensor_slot(&mut model, &name).ok_or_else(|| r.err(format!("unknown tensor `{name}`")))?;
        if slot.shape() != tensor.shape() {
            return Err(r.err(format!("tensor `{name}` has shape {:?}, expected {:?}", tensor.shape(), slot.shape())));
        }
        *slot = tensor;
    }
    r.finish()?;
    Ok(model)
}

fn tensor_slot<'m>(model: &'m mut EncoderModel, name: &str) -> Option<&'m mut Tensor> {
    match name {
        "mlm_head.weight" => return Some(&mut model.mlm_head_mut().weight),
        "mlm_head.bias" => return Some(&mut model.mlm_head_mut().bias),
        _ => {}
    }
    if let Some(i) = model.prunable().iter().position(|p| p.name() == name) {
        return Some(model.prunable_mut()[i].weight_mut());
    }
    model.aux_mut().iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
}

pub fn save_weights(model: &EncoderModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_weights(model))
}

pub fn load_weights(path: &Path) -> Result<EncoderModel> {
    let bytes = fs::read(path).at(path)?;
    decode_weights(&bytes, path)
}

pub fn encode_mask(ckpt: &SubnetworkCheckpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MASK_MAGIC);
    w.u32(FORMAT_VERSION);
    w.f64(ckpt.sparsity);
    let method = ckpt.method.as_str();
    w.u8(method.len() as u8);
    w.0.extend_from_slice(method.as_bytes());
    w.u64(ckpt.seed);
    w.u32(ckpt.masks.len() as u32);
    for (name, mask) in &ckpt.masks {
        w.name(name);
        w.shape(mask.shape());
        w.0.extend_from_slice(&mask.to_bytes());
    }
    w.0
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<SubnetworkCheckpoint> {
    let mut r = Reader::new(bytes, path);
    r.header(MASK_MAGIC)?;
    let sparsity = r.f64()?;
    let n = r.u8()? as usize;
    let method_raw = r.bytes(n)?;
    let method: Method = std::str::from_utf8(method_raw)
        .map_err(|_| r.err("method is not UTF-8"))?
        .parse()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.name()?;
        let shape = r.shape()?;
        let size: usize = shape.iter().product();
        let raw = r.bytes(size.div_ceil(8))?;
        masks.push((name, Bitmask::from_bytes(&shape, raw)?));
    }
    r.finish()?;
    Ok(SubnetworkCheckpoint {
        sparsity,
        method,
        seed,
        masks,
    })
}

pub fn save_mask(ckpt: &SubnetworkCheckpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_mask(ckpt))
}

pub fn load_mask(path: &Path) -> Result<SubnetworkCheckpoint> {
    let bytes = fs::read(path).at(path)?;
    decode_mask(&bytes, path)
}
