//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SKYCKPT\0"
//! version  u32      1
//! meta_len u32, meta: UTF-8 JSON
//! count    u32
//! count x { name_len u32, name, dtype u8 (0 = f32, 1 = f64), ndim u32, dims u64 x ndim, data }
//! digest   32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SKYCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Data,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    entries: Vec<Entry>,
}

trait Store: Scalar {
    fn wrap(v: Vec<Self>) -> Data;
    fn unwrap(d: &Data) -> Option<&[Self]>;
}

impl Store for f32 {
    fn wrap(v: Vec<f32>) -> Data {
        Data::F32(v)
    }
    fn unwrap(d: &Data) -> Option<&[f32]> {
        match d {
            Data::F32(v) => Some(v),
            Data::F64(_) => None,
        }
    }
}

impl Store for f64 {
    fn wrap(v: Vec<f64>) -> Data {
        Data::F64(v)
    }
    fn unwrap(d: &Data) -> Option<&[f64]> {
        match d {
            Data::F64(v) => Some(v),
            Data::F32(_) => None,
        }
    }
}

/// Element types a checkpoint can hold.
#[allow(private_bounds)]
pub trait Storable: Store {}
impl Storable for f32 {}
impl Storable for f64 {}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, entries: Vec::new() }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn put<T: Storable>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let name = name.into();
        self.entries.retain(|e| e.name != name);
        self.entries.push(Entry { name, shape: t.shape().to_vec(), data: T::wrap(t.data().to_vec()) });
    }

    pub fn get<T: Storable>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| NnError::Mismatch(format!("tensor `{name}` not in checkpoint")))?;
        let data = T::unwrap(&e.data).ok_or_else(|| {
            NnError::Mismatch(format!("tensor `{name}` is not stored as {}", T::DTYPE.name()))
        })?;
        Tensor::from_vec(e.shape.clone(), data.to_vec())
    }

    /// Stores every tensor of `params` under `prefix.name`.
    pub fn put_params<T: Storable>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            self.put(format!("{prefix}.{name}"), t);
        }
    }

    /// Overwrites `params` in place from `prefix.*` entries, checking names and shapes.
    pub fn load_params<T: Storable>(&self, prefix: &str, params: &mut ParamSet<T>) -> Result<()> {
        let names: Vec<String> = params.names().to_vec();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = self.get::<T>(&format!("{prefix}.{name}"))?;
            if t.shape() != slot.shape() {
                return Err(NnError::Mismatch(format!(
                    "`{prefix}.{name}` has shape {:?}, network expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            let dtype = match e.data {
                Data::F32(_) => DType::F32,
                Data::F64(_) => DType::F64,
            };
            out.push(dtype.code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                Data::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                Data::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(NnError::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(NnError::Format("checksum mismatch (file truncated or corrupt)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| NnError::Format(format!("metadata: {e}")))?;
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| NnError::Format("tensor name is not UTF-8".into()))?;
            let dtype = DType::from_code(r.take(1)?[0])
                .ok_or_else(|| NnError::Format(format!("unknown dtype for `{name}`")))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = match dtype {
                DType::F32 => Data::F32(r.take(n * 4)?.chunks(4).map(f32::read_le).collect()),
                DType::F64 => Data::F64(r.take(n * 8)?.chunks(8).map(f64::read_le).collect()),
            };
            entries.push(Entry { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(NnError::Format("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint { meta, entries })
    }

    /// Writes via a temporary file and rename so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            NnError::Format(m) => NnError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
