//! Named-tensor checkpoint archives.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic   b"WSCK"
//! version u32 (currently 1)
//! family  u8 (0 = native, 1 = bert-like, 2 = gpt-like)
//! count   u32
//! manifest, per tensor:
//!     name_len u32, name utf-8 bytes
//!     dtype    u8 (0 = f32)
//!     ndim     u32, dims u32 each
//! payloads, per tensor in manifest order:
//!     f32 little-endian values, then crc32 (u32) of those payload bytes
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFamily {
    Native,
    BertLike,
    GptLike,
}

impl SourceFamily {
    fn code(self) -> u8 {
        match self {
            SourceFamily::Native => 0,
            SourceFamily::BertLike => 1,
            SourceFamily::GptLike => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(SourceFamily::Native),
            1 => Ok(SourceFamily::BertLike),
            2 => Ok(SourceFamily::GptLike),
            _ => Err(Error::ArchiveFormat(format!("unknown family code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ArchiveFormat(format!(
                "entry data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(ArchiveEntry {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn from_tensor(name: impl Into<String>, tensor: &Tensor) -> Self {
        ArchiveEntry {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            data: tensor.data().iter().map(|v| *v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| *v as f64).collect(),
        )
        .unwrap()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub family: SourceFamily,
    entries: Vec<ArchiveEntry>,
    index: HashMap<String, usize>,
}

impl TensorArchive {
    pub fn new(family: SourceFamily) -> Self {
        TensorArchive {
            family,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, entry: ArchiveEntry) -> Result<()> {
        if self.index.contains_key(&entry.name) {
            return Err(Error::ArchiveFormat(format!(
                "duplicate tensor name {:?}",
                entry.name
            )));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.family.code());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(0u8); // dtype f32
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
        }
        for e in &self.entries {
            let start = out.len();
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::ArchiveFormat("truncated file".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let s = take(pos, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::ArchiveFormat("bad magic".into()));
        }
        let version = read_u32(&mut pos)?;
        if version != VERSION {
            return Err(Error::ArchiveFormat(format!(
                "version mismatch: file {version}, supported {VERSION}"
            )));
        }
        let family = SourceFamily::from_code(take(&mut pos, 1)?[0])?;
        let count = read_u32(&mut pos)? as usize;

        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut pos)? as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::ArchiveFormat("name is not utf-8".into()))?
                .to_string();
            let dtype = take(&mut pos, 1)?[0];
            if dtype != 0 {
                return Err(Error::ArchiveFormat(format!("unknown dtype {dtype}")));
            }
            let ndim = read_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut pos)? as usize);
            }
            manifest.push((name, shape));
        }

        let mut archive = TensorArchive::new(family);
        for (name, shape) in manifest {
            let numel: usize = shape.iter().product();
            let payload = take(&mut pos, numel * 4)?;
            let crc_stored = read_u32(&mut pos)?;
            if crc32fast::hash(payload) != crc_stored {
                return Err(Error::ArchiveFormat(format!(
                    "checksum failure for tensor {name:?}"
                )));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            archive.push(ArchiveEntry { name, shape, data })?;
        }
        if pos != bytes.len() {
            return Err(Error::ArchiveFormat("trailing bytes after payload".into()));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new(SourceFamily::BertLike);
        a.push(ArchiveEntry::new("x/a", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        a.push(ArchiveEntry::new("x/b", vec![3], vec![-1.0, 0.5, 2.5]).unwrap())
            .unwrap();
        a.push(ArchiveEntry::new("y", vec![1], vec![9.0]).unwrap())
            .unwrap();
        a
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let a = sample();
        let bytes = a.to_bytes();
        let b = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, b.to_bytes());
    }

    #[test]
    fn corrupting_a_payload_byte_fails_checksum() {
        let a = sample();
        let mut bytes = a.to_bytes();
        // flip one byte inside the first payload (manifest ends before payloads)
        let payload_start = bytes.len() - (4 * 4 + 4) - (3 * 4 + 4) - (4 + 4);
        bytes[payload_start] ^= 0xff;
        let err = TensorArchive::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = sample().to_bytes();
        let err = TensorArchive::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::ArchiveFormat(_)));
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 99;
        let err = TensorArchive::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn empty_archive_is_valid() {
        let a = TensorArchive::new(SourceFamily::Native);
        let b = TensorArchive::from_bytes(&a.to_bytes()).unwrap();
        assert!(b.is_empty());
        assert_eq!(b.family, SourceFamily::Native);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = TensorArchive::new(SourceFamily::Native);
        a.push(ArchiveEntry::new("t", vec![1], vec![0.0]).unwrap())
            .unwrap();
        assert!(a
            .push(ArchiveEntry::new("t", vec![1], vec![1.0]).unwrap())
            .is_err());
    }
}
