//! Binary checkpoint format.
//!
//! ```text
//! "METX1"                       5 bytes magic
//! version                       u32
//! config length, config text    u32 + UTF-8 `key = value` lines
//! parameter count               u32
//! per parameter:
//!   name length, name           u32 + UTF-8
//!   rank, extents               u32 + u32 each
//!   payload                     f32 per value
//! checksum                      u64, FNV-1a over all payload bytes
//! ```
//!
//! Integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 5] = b"METX1";
pub const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64-bit hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_text();
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.params.len())?;
        let mut payload = Vec::new();
        for (name, t) in self.params.iter() {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            let start = out.len();
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            payload.extend_from_slice(&out[start..]);
        }
        out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = RunConfig::from_text(&r.string()?)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count);
        let mut payload = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            payload.extend_from_slice(raw);
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let stored = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checksum".into()));
        }
        if stored != fnv1a(&payload) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let params = ModelParams::from_tensors(tensors);
        params
            .check_layout(&config.model_config())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Checksum stored in the trailer.
    pub fn checksum(&self) -> Result<u64> {
        let b = self.to_bytes()?;
        Ok(u64::from_le_bytes(b[b.len() - 8..].try_into().expect("8 bytes")))
    }

    /// Bytes of parameter payload, four per value.
    pub fn payload_len(&self) -> usize {
        self.params.numel() * 4
    }
}
