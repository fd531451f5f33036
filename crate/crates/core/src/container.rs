//! Named-array container shared by checkpoints (`SRLT`) and raw array
//! dumps (`SRLA`).
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      [u8; 4]
//! version    u32
//! digest     [u8; 32]
//! count      u32
//! count × { name_len u32, name [u8], dtype u8, rank u32, dims [u64; rank],
//!           offset u64, nbytes u64 }
//! payloads   raw element bytes at the recorded absolute offsets
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Array, Real};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SRLT";
pub const ARRAY_MAGIC: [u8; 4] = *b"SRLA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U64(_) => 2,
            TensorData::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn width(code: u8) -> Option<usize> {
        match code {
            0 => Some(4),
            1 | 2 => Some(8),
            3 => Some(1),
            _ => None,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(code: u8, bytes: &[u8]) -> Self {
        match code {
            0 => TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => TensorData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => TensorData::U64(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => TensorData::U8(bytes.to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_array<T: Real>(a: &Array<T>) -> Self {
        let data = match T::DTYPE {
            crate::numerics::DType::F32 => TensorData::F32(a.data().iter().map(|v| v.f64() as f32).collect()),
            crate::numerics::DType::F64 => TensorData::F64(a.data().iter().map(|v| v.f64()).collect()),
        };
        Self {
            shape: a.shape().to_vec(),
            data,
        }
    }

    pub fn u64s(values: Vec<u64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: TensorData::U64(values),
        }
    }

    pub fn bytes(values: Vec<u8>) -> Self {
        Self {
            shape: vec![values.len()],
            data: TensorData::U8(values),
        }
    }

    /// Float payloads as an array of `T`; the stored precision must match `T`
    /// unless `convert` is set.
    pub fn to_array<T: Real>(&self, convert: bool) -> Option<Array<T>> {
        let data: Vec<T> = match (&self.data, T::DTYPE) {
            (TensorData::F32(v), crate::numerics::DType::F32) => v.iter().map(|&x| T::c(x as f64)).collect(),
            (TensorData::F64(v), crate::numerics::DType::F64) => v.iter().map(|&x| T::c(x)).collect(),
            (TensorData::F32(v), _) if convert => v.iter().map(|&x| T::c(x as f64)).collect(),
            (TensorData::F64(v), _) if convert => v.iter().map(|&x| T::c(x)).collect(),
            _ => return None,
        };
        Array::new(&self.shape, data).ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub digest: [u8; 32],
    pub entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(magic: [u8; 4], digest: [u8; 32]) -> Self {
        Self {
            magic,
            digest,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header_len: usize = 4
            + 4
            + 32
            + 4
            + self
                .entries
                .iter()
                .map(|(n, t)| 4 + n.len() + 1 + 4 + 8 * t.shape.len() + 16)
                .sum::<usize>();
        let mut out = Vec::with_capacity(header_len);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = header_len as u64;
        for (name, t) in &self.entries {
            let nbytes = (t.data.len() * TensorData::width(t.data.code()).unwrap()) as u64;
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.data.code());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&nbytes.to_le_bytes());
            offset += nbytes;
        }
        debug_assert_eq!(out.len(), header_len);
        for (_, t) in &self.entries {
            t.data.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let m: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if m != magic {
            return Err(bad("magic", format!("expected {:?}, found {:?}", as_text(&magic), as_text(&m))));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(bad("version", format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32, "digest")?.try_into().unwrap();
        let count = r.u32("entry count")? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let field = |what: &str| format!("entry {i} {what}");
            let nlen = r.u32(&field("name length"))? as usize;
            let name = String::from_utf8(r.take(nlen, &field("name"))?.to_vec())
                .map_err(|_| bad(&field("name"), "not UTF-8".into()))?;
            let code = r.take(1, &format!("{name} dtype"))?[0];
            let width = TensorData::width(code).ok_or_else(|| bad(&format!("{name} dtype"), format!("unknown code {code}")))?;
            let rank = r.u32(&format!("{name} rank"))? as usize;
            if rank > 16 {
                return Err(bad(&format!("{name} rank"), format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&format!("{name} shape"))? as usize);
            }
            let offset = r.u64(&format!("{name} offset"))? as usize;
            let nbytes = r.u64(&format!("{name} size"))? as usize;
            let elems = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if elems.and_then(|e| e.checked_mul(width)) != Some(nbytes) {
                return Err(bad(&format!("{name} size"), format!("{nbytes} bytes do not match shape {shape:?}")));
            }
            dir.push((name, code, shape, offset, nbytes));
        }
        let mut entries = Vec::with_capacity(dir.len());
        for (name, code, shape, offset, nbytes) in dir {
            let end = offset.checked_add(nbytes).filter(|&e| e <= bytes.len());
            let Some(end) = end else {
                return Err(bad(&name, format!("payload at {offset}+{nbytes} runs past end of file ({} bytes)", bytes.len())));
            };
            let data = TensorData::read_le(code, &bytes[offset..end]);
            entries.push((name, Tensor { shape, data }));
        }
        Ok(Self { magic, digest, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic)
    }
}

fn as_text(m: &[u8]) -> String {
    String::from_utf8_lossy(m).into_owned()
}

fn bad(field: &str, msg: String) -> Error {
    Error::Checkpoint {
        field: field.to_string(),
        msg,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(bad(field, format!("file truncated at byte {}", self.bytes.len()))),
        }
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Writes arrays as an `SRLA` container.
pub fn save_arrays<T: Real>(path: &Path, arrays: &[(&str, &Array<T>)]) -> Result<()> {
    let mut c = Container::new(ARRAY_MAGIC, [0; 32]);
    for (name, a) in arrays {
        c.push(*name, Tensor::from_array(*a));
    }
    c.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(CHECKPOINT_MAGIC, [7; 32]);
        c.push("w", Tensor::from_array(&Array::<f32>::new(&[2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, 4.0, 5.0]).unwrap()));
        c.push("d", Tensor::from_array(&Array::<f64>::new(&[1], vec![std::f64::consts::PI]).unwrap()));
        c.push("step", Tensor::u64s(vec![42]));
        c.push("cfg", Tensor::bytes(b"a = 1\n".to_vec()));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, CHECKPOINT_MAGIC).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"SRLT");
    }

    #[test]
    fn corruption_names_the_field() {
        let bytes = sample().to_bytes();
        let err = Container::from_bytes(&bytes, ARRAY_MAGIC).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { ref field, .. } if field == "magic"));
        let err = Container::from_bytes(&bytes[..bytes.len() - 3], CHECKPOINT_MAGIC).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { ref field, .. } if field == "cfg"), "{err}");
        let err = Container::from_bytes(&bytes[..20], CHECKPOINT_MAGIC).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { ref field, .. } if field == "digest"));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Container::from_bytes(&v, CHECKPOINT_MAGIC), Err(Error::Checkpoint { ref field, .. }) if field == "version"));
    }
}
