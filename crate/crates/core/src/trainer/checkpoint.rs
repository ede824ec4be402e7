//! Binary checkpoint format.
//!
//! ```text
//! "NULM" | version u32 | header_len u32 | header JSON
//! tensor_count u32 | per tensor (sorted by name):
//!     name_len u32 | name | ndim u32 | dims u32… | f32 payload
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::vocab::Vocab;

const MAGIC: &[u8; 4] = b"NULM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub vocab: Vocab,
    pub step: u64,
    pub train_digest: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    step: u64,
    train_digest: String,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad("value exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.model.config().clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            train_digest: self.train_digest.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + self.model.n_params() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        let tensors = self.model.layout().sorted();
        put_u32(&mut out, tensors.len())?;
        for t in tensors {
            put_u32(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len())?;
            for &d in &t.shape {
                put_u32(&mut out, d)?;
            }
            for &p in &self.model.params[t.offset..t.offset + t.len()] {
                out.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate()?;
        if header.vocab.len() != header.config.vocab_size {
            return Err(bad("vocabulary size disagrees with model config"));
        }
        let mut model = ModelState::zeros(&header.config)?;
        let expected: Vec<_> = model
            .layout()
            .sorted()
            .into_iter()
            .map(|t| (t.name.clone(), t.shape.clone(), t.offset))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(bad(format!("expected {} tensors, found {count}", expected.len())));
        }
        for (name, shape, offset) in expected {
            let nlen = r.u32()? as usize;
            let got = r.take(nlen)?;
            if got != name.as_bytes() {
                return Err(bad(format!(
                    "expected tensor {name}, found {}",
                    String::from_utf8_lossy(got)
                )));
            }
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != shape {
                return Err(bad(format!("tensor {name}: shape {dims:?}, expected {shape:?}")));
            }
            let len: usize = shape.iter().product();
            let payload = r.take(len * 4)?;
            for (i, c) in payload.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(bad(format!("tensor {name}: non-finite value")));
                }
                model.params[offset + i] = v as f64;
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self {
            model,
            vocab: header.vocab,
            step: header.step,
            train_digest: header.train_digest,
        })
    }
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
            .ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, mlm_probabilities};
    use crate::vocab::build_vocab;

    fn sample() -> Checkpoint {
        let vocab = build_vocab(12).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            max_len: 10,
            d_model: 8,
            d_ff: 12,
            n_heads: 2,
            n_layers: 2,
            seed: 9,
        };
        Checkpoint {
            model: init_params(&cfg).unwrap(),
            vocab,
            step: 17,
            train_digest: "abc".into(),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let s = [4, 7, 2, 9];
        assert_eq!(
            mlm_probabilities(&c.model, &s).unwrap(),
            mlm_probabilities(&back.model, &s).unwrap()
        );
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(_))));
        let mut b = bytes.clone();
        b[4] = 2;
        assert!(Checkpoint::from_bytes(&b).is_err());
        let mut b = bytes.clone();
        b[13] ^= 0xff;
        assert!(Checkpoint::from_bytes(&b).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut b = bytes.clone();
        b.push(0);
        assert!(Checkpoint::from_bytes(&b).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }
}
