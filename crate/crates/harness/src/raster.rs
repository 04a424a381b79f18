//! Uncompressed raster images: a 16-byte header (`RAW1`, then width,
//! height and channel count as little-endian u32) followed by 8-bit samples
//! in row-major, channel-interleaved order.

use std::fs;
use std::path::Path;

use cvgl_numerics::Tensor;

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"RAW1";
pub const HEADER_LEN: usize = 16;

/// Pixel normalization applied before the network: `(x/255 − MEAN) / STD`.
pub const MEAN: f64 = 0.5;
pub const STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    /// `height × width × channels` samples.
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(HarnessError::Config(format!(
                "{width}x{height}x{channels} image needs {expected} samples, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(HarnessError::format(path, "missing RAW1 header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let (width, height, channels) = (word(4), word(8), word(12));
        let body = &bytes[HEADER_LEN..];
        if body.len() != width as usize * height as usize * channels as usize {
            return Err(HarnessError::format(
                path,
                format!("{width}x{height}x{channels} header but {} samples", body.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: body.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Normalized `[C × H × W]` network input.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width as usize, self.height as usize, self.channels as usize);
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            let v = self.data[rest * c + ch] as f64 / 255.0;
            (v - MEAN) / STD
        })
    }
}
