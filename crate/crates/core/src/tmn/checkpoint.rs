//! Binary model archive, little-endian:
//!
//! ```text
//! "KPCK" | version u32 | manifest (u32 len + JSON) | count u32
//!        | count x [name (u32 len + utf8) | ndim u32 | dims u32... | f32 data]
//!        | crc32 u32
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{TmnConfig, TmnModel};
use crate::nn::Layer;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"KPCK";
const VERSION: u32 = 1;
const OPTIM_PREFIX: &str = "optim.velocity.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Frame-to-proposal matching scores.
    #[default]
    Knowledge,
    /// Frame embeddings.
    RawFrames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TmnConfig,
    pub input: InputKind,
    /// Hex SHA-256 of the knowledge base the model was trained on.
    pub kb_hash: String,
    pub encoder_id: String,
    pub seed: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: TmnModel,
    /// Optimizer buffers keyed by parameter name.
    pub optimizer: Vec<(String, ArrayD<f64>)>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, value: &ArrayD<f64>) {
    put_str(buf, name);
    buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
    for &d in value.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in value.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).ok()
    }

    fn tensor(&mut self) -> Option<(String, ArrayD<f64>)> {
        let name = self.string()?.to_owned();
        let ndim = self.u32()? as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Option<_>>()?;
        let count: usize = dims.iter().product();
        let raw = self.take(count.checked_mul(4)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Some((name, ArrayD::from_shape_vec(IxDyn(&dims), data).ok()?))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut buf, &serde_json::to_string(&self.meta)?);
        let params = self.model.params();
        buf.extend_from_slice(&((params.len() + self.optimizer.len()) as u32).to_le_bytes());
        for p in params {
            put_tensor(&mut buf, &p.name, &p.value);
        }
        for (name, v) in &self.optimizer {
            put_tensor(&mut buf, &format!("{OPTIM_PREFIX}{name}"), v);
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let bad = |reason: String| Error::Integrity {
            path: path.to_owned(),
            reason,
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a model checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(bad("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32().ok_or_else(|| bad("truncated".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_json = r.string().ok_or_else(|| bad("truncated manifest".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(meta_json).map_err(|e| bad(format!("manifest: {e}")))?;
        let count = r.u32().ok_or_else(|| bad("truncated".into()))?;
        let mut tensors = HashMap::new();
        let mut optimizer = Vec::new();
        for _ in 0..count {
            let (name, value) = r.tensor().ok_or_else(|| bad("truncated tensor".into()))?;
            match name.strip_prefix(OPTIM_PREFIX) {
                Some(p) => optimizer.push((p.to_owned(), value)),
                None => {
                    tensors.insert(name, value);
                }
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes".into()));
        }
        let mut model = TmnModel::new(meta.config.clone(), meta.seed).map_err(|e| bad(e.to_string()))?;
        let mut params = model.params_mut();
        if params.len() != tensors.len() {
            return Err(bad(format!(
                "archive holds {} tensors, architecture has {}",
                tensors.len(),
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let v = tensors
                .remove(&p.name)
                .ok_or_else(|| bad(format!("missing tensor {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(bad(format!("tensor {} has shape {:?}", p.name, v.shape())));
            }
            p.value = v;
        }
        Ok(Checkpoint { meta, model, optimizer })
    }

    /// Atomic write: temporary file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor3;

    fn ckpt() -> Checkpoint {
        let config = TmnConfig {
            input_dim: 5,
            hidden_dim: 8,
            heads: 2,
            classes: 3,
            frames: 4,
            ..Default::default()
        };
        let model = TmnModel::new(config.clone(), 7).unwrap();
        let optimizer = vec![("head.bias".to_owned(), ArrayD::from_elem(IxDyn(&[3]), 0.5))];
        Checkpoint {
            meta: CheckpointMeta {
                config,
                input: InputKind::Knowledge,
                kb_hash: "00".into(),
                encoder_id: "toy".into(),
                seed: 7,
                extra: serde_json::Value::Null,
            },
            model,
            optimizer,
        }
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let c = ckpt();
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes, Path::new("m.ckpt")).unwrap();
        assert_eq!(back.meta, c.meta);
        for (a, b) in c.model.params().iter().zip(back.model.params()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.encode().unwrap(), bytes);
        let x = Tensor3::from_elem((1, 4, 5), 0.3);
        let (a, b) = (c.model.infer(&x).unwrap(), back.model.infer(&x).unwrap());
        assert!((a - b).iter().all(|d| d.abs() < 1e-5));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = ckpt().encode().unwrap();
        let p = Path::new("m.ckpt");
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], p).is_err());
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        let err = Checkpoint::decode(&flipped, p).err().unwrap().to_string();
        assert!(err.contains("m.ckpt"), "{err}");
    }
}
