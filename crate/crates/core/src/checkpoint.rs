//! Versioned binary checkpoints.
//!
//! Layout: the magic `ADF1`, a little-endian `u64` header length, a JSON
//! header, then the payload. Each header entry names one parameter with its
//! dtype, shape, byte offset into the payload and trainable flag. Blocks are
//! little-endian `f32`, stored back to back in header order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;

pub const MAGIC: &[u8; 4] = b"ADF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.numel() as u64 * 4
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub seed: u64,
    /// Resolved run configuration as ordered `key, value` pairs.
    pub config: Vec<(String, String)>,
    pub params: Vec<ParamEntry>,
}

impl CheckpointHeader {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Checks dtypes and that blocks tile `[0, payload_len)` in order.
    fn validate(&self, payload_len: u64) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut expected = 0u64;
        for e in &self.params {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("`{}` has dtype {}", e.name, e.dtype)));
            }
            if e.offset < expected {
                return Err(Error::Checkpoint(format!(
                    "`{}` at offset {} overlaps the previous block ending at {expected}",
                    e.name, e.offset
                )));
            }
            if e.offset > expected {
                return Err(Error::Checkpoint(format!(
                    "gap before `{}`: offset {} but previous block ends at {expected}",
                    e.name, e.offset
                )));
            }
            expected += e.byte_len();
        }
        if expected != payload_len {
            return Err(Error::Checkpoint(format!(
                "payload holds {payload_len} bytes but blocks need {expected}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Values of each header entry, in header order.
    pub blocks: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn capture<M: Module<f32> + ?Sized>(model: &M, config: Vec<(String, String)>, seed: u64) -> Self {
        let mut params = Vec::new();
        let mut blocks = Vec::new();
        let mut offset = 0u64;
        for p in model.parameters() {
            let entry = ParamEntry {
                name: p.name().to_string(),
                dtype: "f32".into(),
                shape: p.shape().to_vec(),
                offset,
                trainable: p.trainable(),
            };
            offset += entry.byte_len();
            params.push(entry);
            blocks.push(p.tensor().to_vec());
        }
        Self {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                seed,
                config,
                params,
            },
            blocks,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.blocks.iter().map(|b| b.len() * 4).sum();
        let mut out = Vec::with_capacity(12 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.blocks.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = split_header(bytes)?;
        header.validate(body.len() as u64)?;
        let blocks = header
            .params
            .iter()
            .map(|e| {
                let start = e.offset as usize;
                body[start..start + e.byte_len() as usize]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect()
            })
            .collect();
        Ok(Self { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn find(&self, name: &str) -> Option<(&ParamEntry, &Vec<f32>)> {
        self.header
            .params
            .iter()
            .zip(&self.blocks)
            .find(|(e, _)| e.name == name)
    }

    /// Writes every parameter of `model` and restores trainable flags. The
    /// parameter sets must match exactly.
    pub fn restore<M: Module<f32> + ?Sized>(&self, model: &M) -> Result<()> {
        let params = model.parameters();
        if params.len() != self.header.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.header.params.len(),
                params.len()
            )));
        }
        for p in &params {
            let (entry, _) = self
                .find(p.name())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name())))?;
            check_shape(entry, p.shape())?;
        }
        for p in params {
            let (entry, values) = self.find(p.name()).expect("checked above");
            p.tensor().data_mut().copy_from_slice(values);
            p.set_trainable(entry.trainable);
        }
        Ok(())
    }

    /// Copies values for parameters present in both; returns how many were
    /// copied. Trainable flags of `model` are kept.
    pub fn init_matching<M: Module<f32> + ?Sized>(&self, model: &M) -> Result<usize> {
        let mut hits = Vec::new();
        for p in model.parameters() {
            if let Some((entry, values)) = self.find(p.name()) {
                check_shape(entry, p.shape())?;
                hits.push((p, values));
            }
        }
        for (p, values) in &hits {
            p.tensor().data_mut().copy_from_slice(values);
        }
        Ok(hits.len())
    }
}

fn check_shape(entry: &ParamEntry, expected: &[usize]) -> Result<()> {
    if entry.shape != expected {
        return Err(Error::Checkpoint(format!(
            "parameter `{}` has shape {:?} in the checkpoint but {:?} in the model",
            entry.name, entry.shape, expected
        )));
    }
    Ok(())
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not an ADF1 checkpoint".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let end = 12usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("header length {len} exceeds file size")))?;
    let header = serde_json::from_slice(&bytes[12..end])?;
    Ok((header, &bytes[end..]))
}

/// Reads only the header of a checkpoint file.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = File::open(path)?;
    let mut prefix = [0u8; 12];
    f.read_exact(&mut prefix)
        .map_err(|_| Error::Checkpoint("file too short for a header".into()))?;
    if &prefix[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not an ADF1 checkpoint".into()));
    }
    let len = u64::from_le_bytes(prefix[4..12].try_into().expect("8 bytes"));
    let mut header = Vec::new();
    f.take(len).read_to_end(&mut header)?;
    if header.len() as u64 != len {
        return Err(Error::Checkpoint(format!("header length {len} exceeds file size")));
    }
    Ok(serde_json::from_slice(&header)?)
}
