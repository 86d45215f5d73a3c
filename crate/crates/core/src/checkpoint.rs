//! Binary weight checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSEG"                      magic, 4 bytes
//! version: u16                currently 1
//! depth: u8, base_channels: u32, batchnorm: u8
//! tensor_count: u32
//! repeated tensor_count times:
//!     name_len: u16, name: [u8; name_len] (UTF-8)
//!     dims: [u32; 4]
//!     values: [f32; product(dims)]
//! crc32: u32                  CRC-32 (IEEE) of every byte after the magic
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::{build_unet, UNetConfig, UNetModel};

pub const MAGIC: &[u8; 4] = b"CSEG";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &UNetModel) -> Self {
        Self {
            config: model.config(),
            tensors: model
                .graph()
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.config.depth as u8);
        out.extend_from_slice(&(self.config.base_channels as u32).to_le_bytes());
        out.push(self.config.batchnorm as u8);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[MAGIC.len()..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::CorruptCheckpoint("missing CSEG magic".into()));
        }
        if bytes.len() < 6 {
            return Err(Error::CorruptCheckpoint("truncated header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 4 + 2 + 6 + 4 + 4 {
            return Err(Error::CorruptCheckpoint("truncated header".into()));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(&payload[4..]) != stored {
            return Err(Error::CorruptCheckpoint("CRC mismatch (truncated or damaged file)".into()));
        }

        let mut r = Reader {
            buf: payload,
            pos: 6,
        };
        let depth = r.u8()? as usize;
        let base_channels = r.u32()? as usize;
        let batchnorm = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::CorruptCheckpoint(format!("batchnorm flag {v}"))),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| Error::CorruptCheckpoint("tensor size overflow".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("tensor size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != payload.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes after tensor table".into()));
        }
        Ok(Self {
            config: UNetConfig {
                depth,
                base_channels,
                batchnorm,
            },
            tensors,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Builds a model from the stored configuration and weights.
    pub fn into_model(self) -> Result<UNetModel> {
        let mut model = build_unet(self.config, 0)?;
        let table = model.graph().params();
        if table.len() != self.tensors.len() {
            return Err(Error::CheckpointMismatch(format!(
                "model has {} tensors, file has {}",
                table.len(),
                self.tensors.len()
            )));
        }
        for (p, (name, t)) in table.iter().zip(&self.tensors) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "expected {} {:?}, found {name} {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
        }
        for (p, (_, t)) in model.graph_mut().params_mut().iter_mut().zip(self.tensors) {
            p.value = t;
        }
        Ok(model)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint("unexpected end of tensor table".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_weights(model: &UNetModel, path: &Path) -> Result<()> {
    if model.graph().params().iter().any(|p| !p.value.is_finite()) {
        return Err(Error::Invalid("refusing to save non-finite weights".into()));
    }
    fs::write(path, Checkpoint::from_model(model).encode()).map_err(|e| Error::io(path, e))
}

/// Loads a full model; the file's configuration block must equal `config`.
pub fn load_weights(path: &Path, config: UNetConfig) -> Result<UNetModel> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.config != config {
        return Err(Error::CheckpointMismatch(format!(
            "file was saved with {:?}, requested {:?}",
            ckpt.config, config
        )));
    }
    ckpt.into_model()
}

/// Loads a full model using the configuration stored in the file.
pub fn load_model(path: &Path) -> Result<UNetModel> {
    Checkpoint::read(path)?.into_model()
}

/// Copies only the encoder tensors (`enc*`) from `path` into `model`, leaving
/// the bottleneck, decoder and head untouched. Nothing is modified on error.
pub fn load_encoder_weights(model: &mut UNetModel, path: &Path) -> Result<usize> {
    let ckpt = Checkpoint::read(path)?;
    let mut updates = Vec::new();
    for (name, t) in ckpt.tensors.into_iter().filter(|(n, _)| n.starts_with("enc")) {
        let id = model
            .graph()
            .param_id(&name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("model has no tensor {name}")))?;
        let expected = model.graph().params()[id].value.shape();
        if expected != t.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "{name}: model {expected:?}, file {:?}",
                t.shape()
            )));
        }
        updates.push((id, t));
    }
    let n = updates.len();
    for (id, t) in updates {
        model.graph_mut().params_mut()[id].value = t;
    }
    Ok(n)
}
