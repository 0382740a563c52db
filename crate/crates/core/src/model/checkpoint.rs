//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "SCNCKPT\0"
//! version  u32
//! hdr_len  u64       length of the TOML header that follows
//! header   TOML      format_version, step, [model], [loss], optimizer_step
//! count    u32       number of tensor blocks
//! block*   u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f64 values
//! ```
//!
//! Optimizer moments, when present, are stored as blocks named
//! `adam.m/<param>` and `adam.v/<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Result};
use crate::losses::LossSpec;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam first and second moments plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub step: u64,
    pub optimizer: Option<OptimizerState>,
    pub loss: LossSpec,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    optimizer_step: Option<u64>,
    model: ModelConfig,
    loss: LossSpec,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Checks that every expected parameter is present with the right shape and finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (name, shape) in self.config.param_shapes() {
            let t = self.param(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Format(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Format(format!("{name}: non-finite values")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            step: self.step,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            model: self.config.clone(),
            loss: self.loss,
        };
        let text = toml::to_string(&header).map_err(|e| ModelError::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let mut blocks: Vec<(String, &Tensor)> =
            self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        if let Some(opt) = &self.optimizer {
            blocks.extend(opt.m.iter().map(|(k, v)| (format!("adam.m/{k}"), v)));
            blocks.extend(opt.v.iter().map(|(k, v)| (format!("adam.v/{k}"), v)));
        }
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, t) in blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let hlen = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(hlen)?)
            .map_err(|e| ModelError::Format(format!("header is not UTF-8: {e}")))?;
        let header: Header = toml::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        let count = r.u32()?;
        let mut params = BTreeMap::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|e| ModelError::Format(e.to_string()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(p) = name.strip_prefix("adam.m/") {
                m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                v.insert(p.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Format("trailing bytes".into()));
        }
        let optimizer = header.optimizer_step.map(|step| OptimizerState { step, m, v });
        let ckpt = Checkpoint {
            config: header.model,
            params,
            step: header.step,
            optimizer,
            loss: header.loss,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
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
            .ok_or_else(|| ModelError::Format("truncated file".into()))?;
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 2,
            d_model: 4,
            d_ff: 6,
            max_positions: 8,
            ..ModelConfig::desk(6, 5)
        }
    }

    #[test]
    fn bit_exact_round_trip() {
        let mut ck = init_params(&tiny(), LossSpec::scones(0.2)).unwrap();
        ck.step = 17;
        let zeros = |ck: &Checkpoint| {
            ck.params
                .iter()
                .map(|(k, t)| (k.clone(), t.map(|x| x * 0.5 + 1e-300)))
                .collect::<BTreeMap<_, _>>()
        };
        ck.optimizer = Some(OptimizerState {
            step: 17,
            m: zeros(&ck),
            v: zeros(&ck),
        });
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        for (k, t) in &ck.params {
            let b = &back.params[k];
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let ck = init_params(&tiny(), LossSpec::softmax()).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
