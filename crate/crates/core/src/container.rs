//! Binary tensor container shared by trajectories, feature tensors and model weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DSID" | version: u32 | dtype: u32 | body
//! ```
//!
//! For a plain tensor (`dtype` 1 = float64, 2 = float32) the body is
//! `ndim: u32 | dims: u64 × ndim | row-major payload`.
//!
//! `dtype` 0 marks a named-tensor bundle:
//! `header_len: u64 | header JSON | count: u32 | count × (name_len: u32 | name | dtype: u32 | tensor body)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DSID";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_BUNDLE: u32 = 0;
const DTYPE_F64: u32 = 1;
const DTYPE_F32: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u32 {
        match self {
            TensorData::F64(_) => DTYPE_F64,
            TensorData::F32(_) => DTYPE_F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                expected: dims,
                actual: vec![data.len()],
            });
        }
        Ok(Self { dims, data })
    }

    /// Payload widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

fn write_body(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &t.data {
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.dims.len() + 8 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&t.data.dtype().to_le_bytes());
    write_body(&mut out, t);
    out
}

pub fn encode_bundle(header: &serde_json::Value, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_BUNDLE.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&t.data.dtype().to_le_bytes());
        write_body(&mut out, t);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptContainer {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                self.corrupt(format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn preamble(&mut self) -> Result<u32> {
        if self.take(4)? != MAGIC {
            return Err(self.corrupt("bad magic"));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(self.corrupt(format!("unsupported format version {version}")));
        }
        self.u32()
    }

    fn body(&mut self, dtype: u32) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 16 {
            return Err(self.corrupt(format!("implausible dimension count {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u64()? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.corrupt("dimension overflow"))?;
        let data = match dtype {
            DTYPE_F64 => {
                let raw = self.take(count.checked_mul(8).ok_or_else(|| self.corrupt("size overflow"))?)?;
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            DTYPE_F32 => {
                let raw = self.take(count.checked_mul(4).ok_or_else(|| self.corrupt("size overflow"))?)?;
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            other => return Err(self.corrupt(format!("unknown dtype code {other}"))),
        };
        Ok(Tensor { dims, data })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.corrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_tensor(buf: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader { buf, pos: 0, path };
    let dtype = r.preamble()?;
    if dtype == DTYPE_BUNDLE {
        return Err(r.corrupt("expected a single tensor, found a bundle"));
    }
    let t = r.body(dtype)?;
    r.finish()?;
    Ok(t)
}

pub fn decode_bundle(buf: &[u8], path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf, pos: 0, path };
    if r.preamble()? != DTYPE_BUNDLE {
        return Err(r.corrupt("expected a named-tensor bundle"));
    }
    let header_len = r.u64()? as usize;
    let header: serde_json::Value = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| r.corrupt(format!("bad header JSON: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.corrupt("tensor name is not UTF-8"))?
            .to_owned();
        let dtype = r.u32()?;
        tensors.push((name, r.body(dtype)?));
    }
    r.finish()?;
    Ok((header, tensors))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?, path)
}

pub fn write_bundle(path: &Path, header: &serde_json::Value, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode_bundle(header, tensors)?)
}

pub fn read_bundle(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    decode_bundle(&fs::read(path)?, path)
}
