//! Binary checkpoints.
//!
//! ```text
//! "SMCK"                     4 bytes
//! version                    u32
//! step                       u64
//! config length, config      u32, UTF-8 JSON of the run configuration
//! tensor count               u32
//! per tensor:
//!   name length, name        u32, UTF-8
//!   rank, dims               u32, rank × u32
//!   values                   f32 × prod(dims)
//! ```
//!
//! All integers and floats are little-endian. Tensors appear in parameter
//! visit order, so equal models serialize to equal bytes.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub model: Model<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &Model<f32>, config: &RunConfig, step: u64) -> Result<Vec<u8>> {
    let mut config = config.clone();
    config.model = model.config.clone();
    let json = serde_json::to_string(&config)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(json.as_bytes());
    let params = model.params();
    put_u32(&mut out, params.len())?;
    for p in params {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.ndim())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    path: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            path: self.path.to_string(),
            needed: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::invalid(format!("{}: {e}", self.path)))
    }
}

pub fn decode_checkpoint(path: &str, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { path, bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_string(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_string(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let step = r.u64()?;
    let config = RunConfig::from_json(r.string()?)?;
    let mut model = Model::<f32>::new(&config.model)?;
    let n = r.u32()? as usize;
    let mut params = model.params_mut();
    if n != params.len() {
        return Err(Error::invalid(format!(
            "{path}: {n} tensors stored, model has {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name = r.string()?;
        if name != p.name {
            return Err(Error::invalid(format!("{path}: expected tensor {}, found {name}", p.name)));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(Error::shape(format!(
                "{path}: tensor {name} stored as {shape:?}, model expects {:?}",
                p.value.shape()
            )));
        }
        let raw = r.take(4 * p.value.len())?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        *p.value = Tensor::from_vec(&shape, data)?;
    }
    drop(params);
    if r.pos != bytes.len() {
        return Err(Error::invalid(format!("{path}: trailing bytes after last tensor")));
    }
    Ok(Checkpoint { step, config, model })
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, config: &RunConfig, step: u64) -> Result<()> {
    let bytes = encode_checkpoint(model, config, step)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&path.display().to_string(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Method;
    use crate::rng::prng;

    fn model(method: Method) -> (Model<f32>, RunConfig) {
        let mut cfg = RunConfig::default();
        cfg.model.method = method;
        cfg.model.sparse_conv_channels = vec![4];
        cfg.model.attention_l = 4;
        cfg.model.embedder.embedding_dim = 5;
        (Model::init_new(&cfg.model, &mut prng(9)).unwrap(), cfg)
    }

    #[test]
    fn round_trip_every_method() {
        for m in Method::ALL {
            let (model, cfg) = model(m);
            let bytes = encode_checkpoint(&model, &cfg, 42).unwrap();
            let ck = decode_checkpoint("x", &bytes).unwrap();
            assert_eq!(ck.step, 42);
            assert_eq!(ck.config, cfg);
            for (a, b) in ck.model.params().iter().zip(model.params()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.value, b.value);
            }
            assert_eq!(encode_checkpoint(&ck.model, &ck.config, 42).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_inputs() {
        let (model, cfg) = model(Method::EmbMean);
        let bytes = encode_checkpoint(&model, &cfg, 1).unwrap();
        let mut b = bytes.clone();
        b[1] = b'X';
        assert!(matches!(decode_checkpoint("x", &b), Err(Error::BadMagic { .. })));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(decode_checkpoint("x", &b), Err(Error::VersionMismatch { .. })));
        assert!(matches!(
            decode_checkpoint("x", &bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }
}
