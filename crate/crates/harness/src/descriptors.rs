//! Descriptor file: magic `CVGD`, u32 version, u32 dtype code (1 = f32),
//! u64 count, u64 dim, then `count × dim` f32 values row by row and `count`
//! u64 ids. All little-endian.

use std::fs;
use std::path::Path;

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"CVGD";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorFile {
    pub dim: usize,
    /// Row-major `count × dim`.
    pub values: Vec<f32>,
    pub ids: Vec<u64>,
}

impl DescriptorFile {
    pub fn from_rows(rows: &[Vec<f64>], ids: Vec<u64>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != ids.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(HarnessError::Config("descriptor rows and ids disagree in shape".into()));
        }
        Ok(Self {
            dim,
            values: rows.iter().flatten().map(|&v| v as f32).collect(),
            ids,
        })
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn byte_len(count: usize, dim: usize) -> usize {
        HEADER_LEN + 4 * count * dim + 8 * count
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::byte_len(self.count(), self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        if buf.len() < HEADER_LEN || &buf[..4] != MAGIC {
            return Err(HarnessError::format(path, "not a descriptor file"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
        let u64_at = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().expect("8 bytes"));
        if u32_at(4) != VERSION {
            return Err(HarnessError::format(path, format!("unsupported version {}", u32_at(4))));
        }
        if u32_at(8) != DTYPE_F32 {
            return Err(HarnessError::format(path, format!("unsupported dtype {}", u32_at(8))));
        }
        let (count, dim) = (u64_at(12) as usize, u64_at(20) as usize);
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN + 8 * count));
        if expected != Some(buf.len()) {
            return Err(HarnessError::format(
                path,
                format!("header says {count}x{dim} but the file has {} bytes", buf.len()),
            ));
        }
        let body = &buf[HEADER_LEN..];
        let split = 4 * count * dim;
        let values = body[..split]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let ids = body[split..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { dim, values, ids })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
