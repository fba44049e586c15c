//! Binary checkpoint format.
//!
//! ```text
//! "BICD" | version: u32 LE | record* | crc32: u32 LE
//! record = name_len: u32 LE | name: UTF-8 | dtype: u8 | rank: u8 | dims: u64 LE * rank | data LE
//! ```
//!
//! The CRC covers every byte before it. Records are read until the CRC
//! trailer is reached.

use std::path::Path;

use crate::auxobj::AuxHeads;
use crate::error::{BicdError, Result};
use crate::model::ChangeNet;
use crate::params::ParamSet;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"BICD";
pub const VERSION: u32 = 1;
pub const THETA_PREFIX: &str = "theta/";
pub const ETA_PREFIX: &str = "eta/";
pub const META_PREFIX: &str = "meta/";

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.dims(),
            StoredTensor::F64(t) => t.dims(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, StoredTensor)>,
}

fn write_record<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| BicdError::Checkpoint(format!("truncated {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor<T: Real>(&mut self, dims: &[usize]) -> Result<Tensor<T>> {
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| BicdError::Checkpoint("tensor size overflows".into()))?;
        let size = std::mem::size_of::<T>();
        let raw = self.take(n.saturating_mul(size), "tensor data")?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Tensor::from_vec(dims, data)
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.records.push((name.into(), StoredTensor::from_tensor(t)));
    }

    pub fn push_meta(&mut self, name: &str, value: f64) {
        self.push(format!("{META_PREFIX}{name}"), &Tensor::scalar(value));
    }

    pub fn push_params<T: Real>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (_, p) in params.iter() {
            self.push(format!("{prefix}{}", p.name), &p.value);
        }
    }

    /// Network parameters, optional auxiliary parameters and scalar metadata.
    pub fn from_parts<T: Real>(net: &ChangeNet<T>, aux: Option<&AuxHeads<T>>, meta: &[(&str, f64)]) -> Self {
        let mut c = Checkpoint::new();
        c.push_params(THETA_PREFIX, &net.params);
        if let Some(aux) = aux {
            c.push_params(ETA_PREFIX, &aux.params);
        }
        for &(k, v) in meta {
            c.push_meta(k, v);
        }
        c
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, name: &str) -> Option<f64> {
        match self.get(&format!("{META_PREFIX}{name}"))? {
            StoredTensor::F32(t) => t.data().first().map(|&v| v as f64),
            StoredTensor::F64(t) => t.data().first().copied(),
        }
    }

    /// Overwrite every parameter of `params` from records under `prefix`.
    pub fn restore_params<T: Real>(&self, prefix: &str, params: &mut ParamSet<T>) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let stored = self
                .get(&key)
                .ok_or_else(|| BicdError::Checkpoint(format!("missing record `{key}`")))?;
            params.assign(&name, stored.to_tensor())?;
        }
        Ok(())
    }

    pub fn restore_net<T: Real>(&self, net: &mut ChangeNet<T>) -> Result<()> {
        self.restore_params(THETA_PREFIX, &mut net.params)
    }

    pub fn restore_aux<T: Real>(&self, aux: &mut AuxHeads<T>) -> Result<()> {
        self.restore_params(ETA_PREFIX, &mut aux.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, t) in &self.records {
            match t {
                StoredTensor::F32(t) => write_record(&mut out, name, t),
                StoredTensor::F64(t) => write_record(&mut out, name, t),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(BicdError::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(BicdError::Checkpoint(format!(
                "crc mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        if &body[..4] != MAGIC {
            return Err(BicdError::Checkpoint("bad magic".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(BicdError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut records = Vec::new();
        while r.pos < body.len() {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| BicdError::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| BicdError::Checkpoint(format!("unknown dtype tag {tag} in `{name}`")))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(r.tensor(&dims)?),
                DType::F64 => StoredTensor::F64(r.tensor(&dims)?),
            };
            records.push((name, t));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| BicdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| BicdError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
