//! Flat-binary tensor files.
//!
//! ```text
//! magic    4 bytes "SDFB"
//! version  u32
//! dtype    u32   1 = f32, 2 = f64, 3 = i64
//! rank     u32
//! dims     rank x u64
//! payload  row-major values
//! ```
//!
//! All integers and values are little-endian.

use std::fs;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SDFB";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    I64 = 3,
}

impl DType {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::I64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlatTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl FlatTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            FlatTensor::F32(t) => t.shape(),
            FlatTensor::F64(t) => t.shape(),
            FlatTensor::I64 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            FlatTensor::F32(_) => DType::F32,
            FlatTensor::F64(_) => DType::F64,
            FlatTensor::I64 { .. } => DType::I64,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let mut buf = Vec::with_capacity(16 + 8 * shape.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dtype() as u32).to_le_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self {
            FlatTensor::F32(t) => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            FlatTensor::F64(t) => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            FlatTensor::I64 { data, .. } => data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |r: String| Error::format(path, r);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(err("not a flat-binary tensor (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(err(format!("unsupported flat-binary version {version}")));
        }
        let dtype = DType::from_code(word(8)).ok_or_else(|| err(format!("unknown dtype code {}", word(8))))?;
        let rank = word(12) as usize;
        let header = 16 + 8 * rank;
        if rank > 8 || bytes.len() < header {
            return Err(err("truncated header".into()));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| u64::from_le_bytes(bytes[16 + 8 * i..24 + 8 * i].try_into().expect("8 bytes")) as usize)
            .collect();
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| err("dimension overflow".into()))?;
        let payload = &bytes[header..];
        if Some(payload.len()) != count.checked_mul(dtype.width()) {
            return Err(err(format!(
                "payload holds {} bytes, shape {:?} of {:?} needs {}",
                payload.len(),
                shape,
                dtype,
                count * dtype.width()
            )));
        }
        Ok(match dtype {
            DType::F32 => FlatTensor::F32(Tensor::from_vec(
                &shape,
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect(),
            )?),
            DType::F64 => FlatTensor::F64(Tensor::from_vec(
                &shape,
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            )?),
            DType::I64 => FlatTensor::I64 {
                shape,
                data: payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8"))).collect(),
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn write_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    FlatTensor::F32(t.clone()).write(path)
}

/// Reads a floating-point tensor, widening or narrowing to `f32`.
pub fn read_f32(path: &Path) -> Result<Tensor<f32>> {
    match FlatTensor::read(path)? {
        FlatTensor::F32(t) => Ok(t),
        FlatTensor::F64(t) => Ok(t.cast()),
        FlatTensor::I64 { .. } => Err(Error::format(path, "expected a floating-point tensor, found i64")),
    }
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    FlatTensor::I64 { shape: vec![labels.len()], data: labels.iter().map(|&l| l as i64).collect() }.write(path)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    match FlatTensor::read(path)? {
        FlatTensor::I64 { shape, data } if shape.len() == 1 => data
            .into_iter()
            .map(|v| usize::try_from(v).map_err(|_| Error::format(path, format!("negative label {v}"))))
            .collect(),
        other => Err(Error::format(path, format!("expected a rank-1 i64 label vector, found {:?}", other.shape()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_f32(dims in proptest::collection::vec(0usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = FlatTensor::F32(Tensor::from_vec(&dims, data).unwrap());
            let back = FlatTensor::from_bytes(&t.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.to_bytes(), t.to_bytes());
        }
    }

    #[test]
    fn header_layout() {
        let t = FlatTensor::I64 { shape: vec![2], data: vec![-1, 7] };
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"SDFB");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 2);
        assert_eq!(b.len(), 24 + 16);
    }

    #[test]
    fn rejects_truncation_and_bad_dtype() {
        let b = FlatTensor::F64(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap()).to_bytes();
        assert!(FlatTensor::from_bytes(&b[..b.len() - 1], Path::new("m")).is_err());
        let mut bad = b.clone();
        bad[8] = 9;
        assert!(FlatTensor::from_bytes(&bad, Path::new("m")).is_err());
    }
}
