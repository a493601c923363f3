//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ECLFCKPT"            8 bytes
//! version               u32
//! meta count            u32, then per entry: key (u32 len + UTF-8), value (u32 len + UTF-8)
//! tensor count          u32, then per tensor: name (u32 len + UTF-8), dtype u8,
//!                       rank u8, dims u64 x rank, raw values
//! crc32                 u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use eclf_nn::{DType, Real, Tensor};

use crate::error::{EclfError, Result};

pub const MAGIC: &[u8; 8] = b"ECLFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }
}

fn wrap<T: Real>(t: &Tensor<T>) -> StoredTensor {
    match T::DTYPE {
        DType::F32 => StoredTensor::F32(t.cast()),
        DType::F64 => StoredTensor::F64(t.cast()),
    }
}

/// Named tensors plus text metadata. Order of insertion is preserved.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| EclfError::Checkpoint(format!("missing metadata {key:?}")))
    }

    pub fn put<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        let stored = wrap(t);
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = stored,
            None => self.tensors.push((name.to_string(), stored)),
        }
    }

    pub fn put_all<T: Real>(&mut self, prefix: &str, names: &[String], tensors: &[Tensor<T>]) {
        for (n, t) in names.iter().zip(tensors) {
            self.put(&format!("{prefix}{n}"), t);
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    /// Fetches a tensor stored with the same precision as `T`.
    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let (_, t) = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| EclfError::Checkpoint(format!("missing tensor {name:?}")))?;
        if t.dtype() != T::DTYPE {
            return Err(EclfError::Checkpoint(format!(
                "tensor {name:?} is stored as {:?}, requested {:?}",
                t.dtype(),
                T::DTYPE
            )));
        }
        Ok(match t {
            StoredTensor::F32(x) => x.cast(),
            StoredTensor::F64(x) => x.cast(),
        })
    }

    pub fn get_all<T: Real>(&self, prefix: &str, names: &[String]) -> Result<Vec<Tensor<T>>> {
        names.iter().map(|n| self.get(&format!("{prefix}{n}"))).collect()
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.tensors.iter().filter_map(|(n, _)| n.strip_prefix(prefix).map(str::to_string)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(t.dtype().code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(x) => x.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(x) => x.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| EclfError::Checkpoint(format!("corrupt checkpoint: {what}"));
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(EclfError::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| corrupt("unknown dtype"))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(dtype.size()).ok_or_else(|| corrupt("tensor size"))?)?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(Tensor::new(shape, raw.chunks(4).map(f32::read_le).collect())?),
                DType::F64 => StoredTensor::F64(Tensor::new(shape, raw.chunks(8).map(f64::read_le).collect())?),
            };
            ck.tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| EclfError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EclfError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            EclfError::Checkpoint(m) => EclfError::Checkpoint(format!("{}: {m}", path.display())),
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
        if self.buf.len() - self.pos < n {
            return Err(EclfError::Checkpoint("corrupt checkpoint: truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| EclfError::Checkpoint("corrupt checkpoint: bad UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("iteration", "12");
        c.put("a.weight", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2));
        c.put("b", &Tensor::<f64>::from_fn(&[4], |i| (i as f64).sqrt()));
        c
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn truncation_and_flips_are_detected() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 7]).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn dtype_is_checked() {
        assert!(sample().get::<f64>("a.weight").is_err());
        assert_eq!(sample().get::<f64>("b").unwrap().data()[1], 1.0);
    }
}
