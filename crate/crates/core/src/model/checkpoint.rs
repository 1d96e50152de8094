//! Binary checkpoint layout (all integers little-endian):
//! magic `MOFLOWCK`, `u32` version, `u32` length + model config JSON,
//! `u32` entry count, then per entry `u32` name length, name bytes,
//! `u32` rank, `u64` dims, and `f64` values.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, MoFlow};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOFLOWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl MoFlow {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        let entries = self.store.entries();
        put_u32(&mut out, entries.len())?;
        for e in entries {
            put_u32(&mut out, e.name.len())?;
            out.extend_from_slice(e.name.as_bytes());
            put_u32(&mut out, e.value.rank())?;
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Rebuild a model from checkpoint bytes. Every stored entry must match a
    /// parameter of the rebuilt architecture by name and shape.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("config: {e}")))?;
        let mut model = MoFlow::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(Error::Format(format!("{count} entries, architecture has {}", model.store.len())));
        }
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Format("name is not UTF-8".into()))?;
            let id = model.store.id(name).ok_or_else(|| Error::Format(format!("unknown entry {name}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != model.store.get(id).shape() {
                return Err(Error::Format(format!("{name}: shape {shape:?} vs {:?}", model.store.get(id).shape())));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            model.store.set(id, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::randomize_parameters;
    use crate::molgraph::VocabularyConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig::small(VocabularyConfig::qm9(), 2, 3, 6);
        let mut model = MoFlow::new(cfg, &mut rng).unwrap();
        randomize_parameters(&mut model.store, &mut rng, 0.3);
        let bytes = model.to_bytes().unwrap();
        let back = MoFlow::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in back.store.entries().iter().zip(model.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let cfg = ModelConfig::small(VocabularyConfig::qm9(), 1, 1, 4);
        let model = MoFlow::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = model.to_bytes().unwrap();
        assert!(MoFlow::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MoFlow::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(MoFlow::from_bytes(&extra).is_err());
    }
}
