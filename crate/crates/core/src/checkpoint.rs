//! Binary container for named `f32` tensors plus JSON metadata.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SARDIFF\0"
//! version   u32
//! kind      u32 length + UTF-8
//! metadata  u32 length + UTF-8 JSON
//! count     u32
//! manifest  count x { u32 name length, name, u32 rank, rank x u64 dims, u64 offset }
//! payload   u64 element count, then f32 values
//! checksum  u32 CRC-32 of every preceding byte
//! ```
//!
//! Offsets in the manifest count `f32` elements from the start of the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SARDIFF\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Checkpoint { kind: kind.to_string(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut buf, &self.kind);
        put_str(&mut buf, &self.meta.to_string());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            put_str(&mut buf, name);
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&offset.to_le_bytes());
            offset += t.len() as u64;
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |reason: &str| Error::format(path, reason);
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(err(&format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        if bytes.len() < 16 {
            return Err(err("truncated checkpoint"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(err("checksum mismatch (truncated or corrupt checkpoint)"));
        }
        let mut cur = Cursor { bytes: body, pos: 12, path };
        let kind = cur.string()?;
        let meta_text = cur.string()?;
        let meta = serde_json::from_str(&meta_text).map_err(|e| err(&format!("bad metadata: {e}")))?;
        let count = cur.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = cur.string()?;
            let rank = cur.u32()? as usize;
            if rank > 8 {
                return Err(err("tensor rank out of range"));
            }
            let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = cur.u64()? as usize;
            manifest.push((name, dims, offset));
        }
        let total = cur.u64()? as usize;
        let payload = cur.take(total.checked_mul(4).ok_or_else(|| err("payload size overflow"))?)?;
        if cur.pos != body.len() {
            return Err(err("trailing bytes after payload"));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, dims, offset) in manifest {
            let len: usize = dims.iter().product();
            if offset.checked_add(len).is_none_or(|end| end > total) {
                return Err(err(&format!("tensor `{name}` exceeds payload")));
            }
            let data = payload[offset * 4..(offset + len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::from_vec(&dims, data)?));
        }
        Ok(Checkpoint { kind, meta, tensors })
    }

    /// Writes via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 string"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("test", serde_json::json!({"a": 1}));
        ck.push("w", Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        ck.push("s", Tensor::scalar(7.25));
        ck
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta, ck.meta);
        for ((n1, a), (n2, b)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..cut], Path::new("mem")).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let e = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(e.to_string().contains("checksum"), "{e}");
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let e = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(e.to_string().contains("version"), "{e}");
    }
}
