//! Flat versioned parameter files.
//!
//! Layout (little endian): magic `KVCK`, format version `u32`, seed `u64`,
//! iteration `u64`, config hash and tool version as `u32`-length-prefixed
//! UTF-8, tensor count `u32`, then per tensor: name length `u32`, name bytes,
//! rank `u32`, dims `u64 × rank`, values `f64 × numel`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::FlatParams;

const MAGIC: &[u8; 4] = b"KVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub seed: u64,
    /// Meta-training iterations completed.
    pub iteration: u64,
    pub config_hash: String,
    pub tool_version: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: FlatParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let put_str = |b: &mut Vec<u8>, s: &str| {
            b.extend_from_slice(&(s.len() as u32).to_le_bytes());
            b.extend_from_slice(s.as_bytes());
        };
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.header.seed.to_le_bytes());
        b.extend_from_slice(&self.header.iteration.to_le_bytes());
        put_str(&mut b, &self.header.config_hash);
        put_str(&mut b, &self.header.tool_version);
        b.extend_from_slice(&(self.tensors.entries.len() as u32).to_le_bytes());
        for (name, shape, values) in &self.tensors.entries {
            put_str(&mut b, name);
            b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(data: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = Reader { data, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let iteration = r.u64()?;
        let config_hash = r.string()?;
        let tool_version = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>, _>>()?;
            entries.push((name, shape, values));
        }
        if r.pos != data.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Checkpoint {
            header: CheckpointHeader { seed, iteration, config_hash, tool_version },
            tensors: FlatParams { entries },
        })
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> FlatParams {
        FlatParams {
            entries: self
                .tensors
                .entries
                .iter()
                .filter_map(|(n, s, v)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), s.clone(), v.clone())))
                .collect(),
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let out = self.data.get(self.pos..self.pos + n).ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Format(e.to_string()))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let c = Checkpoint {
            header: CheckpointHeader {
                seed: 7,
                iteration: 12,
                config_hash: "ab12".into(),
                tool_version: "0.1.0".into(),
            },
            tensors: FlatParams {
                entries: vec![
                    ("theta/cat.w".into(), vec![2, 1], vec![1.5, -0.25]),
                    ("theta/s".into(), vec![], vec![3.0]),
                ],
            },
        };
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"KVCK");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(c.section("theta/").entries[0].0, "cat.w");
    }
}
