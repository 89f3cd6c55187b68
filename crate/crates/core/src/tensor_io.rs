//! The on-disk tensor container used wherever arrays touch the filesystem.
//!
//! A single tensor record is laid out as:
//!
//! ```text
//! offset  size      field
//! 0       4         magic  b"SVTN"
//! 4       1         format version (1)
//! 5       1         dtype code: 0 = f32, 1 = f64, 2 = u8, 3 = u32, 4 = i64
//! 6       1         rank r (0..=255)
//! 7       1         reserved, must be 0
//! 8       8 * r     dimensions, u64 little-endian
//! 8 + 8r  ...       payload, row-major, little-endian elements
//! ```
//!
//! A bundle of named tensors (checkpoints) is:
//!
//! ```text
//! 0       4         magic  b"SVTB"
//! 4       1         format version (1)
//! 5       3         reserved, must be 0
//! 8       4         entry count n, u32 little-endian
//! then n entries, sorted by name:
//!         4         name length, u32 little-endian
//!         len       name, UTF-8
//!         8         record length, u64 little-endian
//!         len       one tensor record as above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SVTN";
pub const BUNDLE_MAGIC: &[u8; 4] = b"SVTB";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
    I64(Vec<i64>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
            TensorData::U32(_) => 3,
            TensorData::I64(_) => 4,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }
}

/// A host-resident dense array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct HostTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl HostTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but payload has {}",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::shape(format!("rank {} exceeds 255", shape.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::Container("expected an f32 tensor".into())),
        }
    }

    pub fn from_candle(t: &Tensor) -> Result<Self> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F32 => TensorData::F32(flat.to_vec1()?),
            DType::F64 => TensorData::F64(flat.to_vec1()?),
            DType::U8 => TensorData::U8(flat.to_vec1()?),
            DType::U32 => TensorData::U32(flat.to_vec1()?),
            DType::I64 => TensorData::I64(flat.to_vec1()?),
            other => return Err(Error::Container(format!("unsupported dtype {other:?}"))),
        };
        Self::new(shape, data)
    }

    pub fn to_candle(&self, device: &Device) -> Result<Tensor> {
        let shape = self.shape.as_slice();
        let t = match &self.data {
            TensorData::F32(v) => Tensor::from_slice(v, shape, device)?,
            TensorData::F64(v) => Tensor::from_slice(v, shape, device)?,
            TensorData::U8(v) => Tensor::from_slice(v, shape, device)?,
            TensorData::U32(v) => Tensor::from_slice(v, shape, device)?,
            TensorData::I64(v) => Tensor::from_slice(v, shape, device)?,
        };
        Ok(t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.data.code());
        out.push(self.shape.len() as u8);
        out.push(0);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != TENSOR_MAGIC {
            return Err(Error::Container("bad tensor magic".into()));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let code = r.u8()?;
        let rank = r.u8()? as usize;
        if r.u8()? != 0 {
            return Err(Error::Container("reserved byte must be zero".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Container("element count overflows".into()))?;
        let data = match code {
            0 => TensorData::F32(r.elements(n, 4, |b| f32::from_le_bytes(b.try_into().unwrap()))?),
            1 => TensorData::F64(r.elements(n, 8, |b| f64::from_le_bytes(b.try_into().unwrap()))?),
            2 => TensorData::U8(r.take(n)?.to_vec()),
            3 => TensorData::U32(r.elements(n, 4, |b| u32::from_le_bytes(b.try_into().unwrap()))?),
            4 => TensorData::I64(r.elements(n, 8, |b| i64::from_le_bytes(b.try_into().unwrap()))?),
            c => return Err(Error::Container(format!("unknown dtype code {c}"))),
        };
        if !r.is_empty() {
            return Err(Error::Container("trailing bytes after payload".into()));
        }
        Self::new(shape, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::decode(&fs::read(path)?)
    }
}

/// Encode a name-sorted bundle of tensors.
pub fn encode_bundle(entries: &BTreeMap<String, HostTensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rec = t.encode();
        out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    out
}

pub fn decode_bundle(bytes: &[u8]) -> Result<BTreeMap<String, HostTensor>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != BUNDLE_MAGIC {
        return Err(Error::Container("bad bundle magic".into()));
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    if r.take(3)? != [0, 0, 0] {
        return Err(Error::Container("reserved bytes must be zero".into()));
    }
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Container("entry name is not UTF-8".into()))?
            .to_string();
        let rec_len = r.u64()? as usize;
        let t = HostTensor::decode(r.take(rec_len)?)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Container(format!("duplicate entry `{name}`")));
        }
    }
    if !r.is_empty() {
        return Err(Error::Container("trailing bytes after bundle".into()));
    }
    Ok(out)
}

pub fn write_bundle(path: &Path, entries: &BTreeMap<String, HostTensor>) -> Result<()> {
    write_atomic(path, &encode_bundle(entries))
}

pub fn read_bundle(path: &Path) -> Result<BTreeMap<String, HostTensor>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode_bundle(&fs::read(path)?)
}

/// Write through a sibling temporary file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Container("truncated data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn elements<T>(&mut self, n: usize, width: usize, f: impl Fn(&[u8]) -> T) -> Result<Vec<T>> {
        let total = n
            .checked_mul(width)
            .ok_or_else(|| Error::Container("payload size overflows".into()))?;
        Ok(self.take(total)?.chunks_exact(width).map(f).collect())
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = HostTensor::f32(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = t.encode();
        assert_eq!(&b[..8], &[b'S', b'V', b'T', b'N', 1, 0, 2, 0]);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn truncated_record_is_rejected() {
        let t = HostTensor::f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.encode();
        assert!(matches!(HostTensor::decode(&b[..b.len() - 1]), Err(Error::Container(_))));
    }

    #[test]
    fn scalar_rank_zero() {
        let t = HostTensor::new(vec![], TensorData::F64(vec![2.5])).unwrap();
        assert_eq!(HostTensor::decode(&t.encode()).unwrap(), t);
    }

    proptest! {
        #[test]
        fn bundle_round_trips(vals in proptest::collection::vec(-1e6f32..1e6, 1..40), names in proptest::collection::btree_set("[a-z.]{1,12}", 1..5)) {
            let mut m = BTreeMap::new();
            for (i, n) in names.into_iter().enumerate() {
                let v: Vec<f32> = vals.iter().map(|x| x + i as f32).collect();
                m.insert(n, HostTensor::f32(vec![v.len()], v).unwrap());
            }
            let bytes = encode_bundle(&m);
            let back = decode_bundle(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(encode_bundle(&back), bytes);
        }
    }
}
