//! `radt-ckpt-1` named-tensor container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset 0   12 bytes   magic "radt-ckpt-1\n"
//! offset 12  u64        header length H
//! offset 20  H bytes    UTF-8 JSON header:
//!                       {"config": <any JSON>, "rng": <RngState|null>,
//!                        "tensors": [{"name": str, "shape": [u64, ...]}, ...]}
//! then       for each tensor in header order: numel x f32
//! ```
//!
//! Nothing may follow the last tensor.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::real::Real;

pub const CKPT_MAGIC: &[u8; 12] = b"radt-ckpt-1\n";

/// Serializable position of a `ChaCha8Rng` stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.seed.len() != 64 {
            return Err(NnError::Format("rng seed must be 32 hex bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|e| NnError::Format(format!("rng seed: {e}")))?;
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|e| NnError::Format(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    rng: Option<RngState>,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub rng: Option<RngState>,
    pub tensors: Vec<(TensorMeta, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_params<T: Real>(params: &ParamStore<T>, config: serde_json::Value, rng: Option<RngState>) -> Self {
        let tensors = params
            .iter()
            .map(|p| {
                (
                    TensorMeta { name: p.name.clone(), shape: p.shape.clone() },
                    p.value.iter().map(|v| v.as_f64() as f32).collect(),
                )
            })
            .collect();
        Checkpoint { config, rng, tensors }
    }

    /// Copy every tensor into `params`; the sets of names must match exactly.
    pub fn load_into<T: Real>(&self, params: &mut ParamStore<T>) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(NnError::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (meta, data) in &self.tensors {
            params.set_values(&meta.name, &meta.shape, data)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            rng: self.rng.clone(),
            tensors: self.tensors.iter().map(|(m, _)| m.clone()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + self.tensors.iter().map(|t| 4 * t.1.len()).sum::<usize>());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (meta, data) in &self.tensors {
            let numel: usize = meta.shape.iter().product();
            if numel != data.len() {
                return Err(NnError::Shape(format!("tensor `{}` shape/data mismatch", meta.name)));
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..12] != CKPT_MAGIC {
            return Err(NnError::Format("missing radt-ckpt-1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| NnError::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in header.tensors {
            let numel: usize = meta.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * numel)
                .ok_or_else(|| NnError::Format(format!("truncated data for tensor `{}`", meta.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            pos += 4 * numel;
            tensors.push((meta, data));
        }
        if pos != bytes.len() {
            return Err(NnError::Format(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { config: header.config, rng: header.rng, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// FNV-1a over the serialized bytes.
    pub fn digest(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_bytes()? {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Ok(h)
    }
}
