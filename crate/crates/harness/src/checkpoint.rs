//! Binary checkpoint.
//!
//! Layout (little-endian): magic `CVGLCKPT`, u32 version, u32 length plus
//! the JSON training config, u64 epoch, RNG state (32-byte seed, u64
//! stream, u128 word position), u64 optimizer step, then the parameters
//! (u32 count; each: name, u8 trainable flag, u32 rank, u64 dims, f64
//! values) and the optimizer moments (u32 count; each: name, u64 length,
//! f64 first moments, f64 second moments). Names are u32 length plus UTF-8.
//! Values are stored in double precision so a reload is bit-exact.

use std::fs;
use std::path::Path;

use cvgl_core::init_model;
use cvgl_numerics::{ParameterStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::optim::{Adam, Moments};

pub const MAGIC: &[u8; 8] = b"CVGLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub rng: RngState,
    pub params: ParameterStore,
    pub optimizer: Adam,
}

/// SHA-256 over names, shapes and values of every parameter under `prefix`.
pub fn namespace_hash(store: &ParameterStore, prefix: &str) -> String {
    let mut h = Sha256::new();
    for (name, p) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(HarnessError::format(self.path, "truncated checkpoint"));
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
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| HarnessError::format(self.path, "name is not UTF-8"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| HarnessError::format(self.path, "length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        w.bytes(&config);
        w.u64(self.epoch);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.optimizer.step);
        w.u32(self.params.len() as u32);
        for (name, p) in self.params.iter() {
            w.bytes(name.as_bytes());
            w.u8(u8::from(p.trainable));
            w.u32(p.value.ndim() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.f64s(p.value.data());
        }
        w.u32(self.optimizer.state.len() as u32);
        for (name, st) in &self.optimizer.state {
            w.bytes(name.as_bytes());
            w.u64(st.m.len() as u64);
            w.f64s(&st.m);
            w.f64s(&st.v);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(HarnessError::format(path, "not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(HarnessError::format(path, format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(n)?)
            .map_err(|e| HarnessError::format(path, format!("config: {e}")))?;
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng = RngState {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let mut optimizer = Adam::new();
        optimizer.step = r.u64()?;
        let mut params = ParameterStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(HarnessError::format(path, format!("bad trainable flag {f}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let value = Tensor::new(shape, r.f64s(numel)?)?;
            params
                .insert(name, value, trainable)
                .map_err(|e| HarnessError::format(path, e.to_string()))?;
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let n = r.u64()? as usize;
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            optimizer.state.insert(name, Moments { m, v });
        }
        if r.pos != buf.len() {
            return Err(HarnessError::format(path, "trailing bytes"));
        }
        Ok(Self {
            config,
            epoch,
            rng,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    /// Loads and checks the parameter layout against the stored config.
    /// With `expected`, a differing config is refused.
    pub fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        let ckpt = Self::from_bytes(&buf, path)?;
        if let Some(cfg) = expected {
            if cfg != &ckpt.config {
                return Err(HarnessError::Config(format!(
                    "checkpoint {} was trained with {}, refusing to use it as {}",
                    path.display(),
                    serde_json::to_string(&ckpt.config).expect("config serializes"),
                    serde_json::to_string(cfg).expect("config serializes"),
                )));
            }
        }
        ckpt.check_layout()?;
        Ok(ckpt)
    }

    /// Parameter names, shapes and trainable flags must match a fresh
    /// model built from the stored config.
    pub fn check_layout(&self) -> Result<()> {
        let fresh = init_model(&self.config.model_config())?;
        let mismatch = fresh.len() != self.params.len()
            || fresh.iter().zip(self.params.iter()).any(|((na, pa), (nb, pb))| {
                na != nb || pa.trainable != pb.trainable || pa.value.shape() != pb.value.shape()
            });
        if mismatch {
            return Err(HarnessError::Config(
                "checkpoint parameters do not match the model its config describes".into(),
            ));
        }
        Ok(())
    }
}
