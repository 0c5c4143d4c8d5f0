//! Binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SLMTENS\0"
//! version    u32
//! kind       u32 length + UTF-8
//! meta       u32 length + UTF-8 JSON (config echo, step, ...)
//! count      u32
//! table      count × { name: u32 len + UTF-8, dtype: u8, ndim: u32,
//!                      dims: ndim × u64, offset: u64, nbytes: u64 }
//! data_len   u64
//! data       data_len bytes; offsets are relative to the start of data
//! crc32      u32 over every preceding byte
//! ```
//!
//! dtype codes: 0 = f64, 1 = u32, 2 = u8.

use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const MAGIC: &[u8; 8] = b"SLMTENS\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn dtype(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::U32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn from_bytes(dtype: u8, bytes: &[u8]) -> Result<Self> {
        Ok(match dtype {
            0 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => TensorData::U8(bytes.to_vec()),
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        })
    }

    fn elem_size(dtype: u8) -> usize {
        match dtype {
            0 => 8,
            1 => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f64(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::F64(data),
        }
    }

    pub fn u32(name: impl Into<String>, shape: &[usize], data: Vec<u32>) -> Self {
        NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::U32(data),
        }
    }

    pub fn u8(name: impl Into<String>, data: Vec<u8>) -> Self {
        NamedTensor {
            name: name.into(),
            shape: vec![data.len()],
            data: TensorData::U8(data),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.pos.checked_add(n).is_some_and(|e| e <= self.buf.len()),
            Error::Truncated(format!("needed {n} bytes at offset {}", self.pos))
        );
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut table = Vec::new();
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            ensure!(
                expected == t.data.len(),
                Error::ShapeMismatch(format!("tensor {} shape {:?} vs {} values", t.name, t.shape, t.data.len()))
            );
            let offset = data.len() as u64;
            t.data.write_bytes(&mut data);
            put_str(&mut table, &t.name);
            table.push(t.data.dtype());
            table.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                table.extend_from_slice(&(d as u64).to_le_bytes());
            }
            table.extend_from_slice(&offset.to_le_bytes());
            table.extend_from_slice(&(data.len() as u64 - offset).to_le_bytes());
        }
        let mut out = Vec::with_capacity(data.len() + table.len() + 256);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &serde_json::to_string(&self.meta)?);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(&table);
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        out.extend_from_slice(&data);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        ensure!(
            r.take(MAGIC.len())? == MAGIC,
            Error::Format("bad magic bytes".into())
        );
        let version = r.u32()?;
        ensure!(
            version == VERSION,
            Error::VersionMismatch {
                found: version,
                expected: VERSION
            }
        );
        let kind = r.string()?;
        let meta: serde_json::Value = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Format(format!("bad meta JSON: {e}")))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.u8()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            let nbytes = r.u64()? as usize;
            entries.push((name, dtype, shape, offset, nbytes));
        }
        let data_len = r.u64()? as usize;
        let data = r.take(data_len)?;
        let body_end = r.pos;
        let stored = r.u32()?;
        ensure!(
            r.pos == buf.len(),
            Error::Format(format!("{} trailing bytes", buf.len() - r.pos))
        );
        let computed = crc32fast::hash(&buf[..body_end]);
        ensure!(stored == computed, Error::Checksum { stored, computed });

        let mut tensors = Vec::with_capacity(entries.len());
        for (name, dtype, shape, offset, nbytes) in entries {
            let n: usize = shape.iter().product();
            ensure!(
                n * TensorData::elem_size(dtype) == nbytes
                    && offset.checked_add(nbytes).is_some_and(|e| e <= data.len()),
                Error::Format(format!("tensor {name} has an inconsistent table entry"))
            );
            tensors.push(NamedTensor {
                data: TensorData::from_bytes(dtype, &data[offset..offset + nbytes])?,
                name,
                shape,
            });
        }
        Ok(TensorFile {
            kind,
            meta,
            tensors,
        })
    }

    /// Writes via a temporary sibling and rename, so readers never observe a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl NamedTensor {
    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            _ => Err(Error::Format(format!("tensor {} is not f64", self.name))),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Ok(v),
            _ => Err(Error::Format(format!("tensor {} is not u32", self.name))),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(Error::Format(format!("tensor {} is not u8", self.name))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        TensorFile {
            kind: "test".into(),
            meta: serde_json::json!({"step": 3}),
            tensors: vec![
                NamedTensor::f64("a", &[2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 4.0]),
                NamedTensor::u32("b", &[3], vec![1, 2, u32::MAX]),
                NamedTensor::u8("c", vec![9, 8]),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let f = sample();
        assert_eq!(TensorFile::from_bytes(&f.to_bytes().unwrap()).unwrap(), f);
    }

    #[test]
    fn distinct_failure_modes() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 0xFF;
        assert!(matches!(TensorFile::from_bytes(&flipped), Err(Error::Checksum { .. })));
        let mut payload = bytes.clone();
        let n = payload.len();
        payload[n - 6] ^= 1;
        assert!(matches!(TensorFile::from_bytes(&payload), Err(Error::Checksum { .. })));
        assert!(matches!(
            TensorFile::from_bytes(&bytes[..bytes.len() - 7]),
            Err(Error::Truncated(_))
        ));
        let mut versioned = bytes.clone();
        versioned[8] = 99;
        assert!(matches!(
            TensorFile::from_bytes(&versioned),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
        assert!(matches!(TensorFile::from_bytes(b"nope"), Err(Error::Truncated(_))));
        assert!(matches!(TensorFile::from_bytes(b"NOTMAGIC0000"), Err(Error::Format(_))));
    }
}
