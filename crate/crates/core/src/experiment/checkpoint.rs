//! Binary checkpoint: `DAMELCKP`, u32 LE config length, config JSON, u64 LE
//! parameter count, trained weights as f64 LE, then averaged weights of the
//! same length when present.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DAMELCKP";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub params: Vec<f64>,
    pub averaged: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if let Some(avg) = &self.averaged {
            if avg.len() != self.params.len() {
                return Err(Error::contract(format!(
                    "averaged weights have {} entries, trained weights {}",
                    avg.len(),
                    self.params.len()
                )));
            }
        }
        let cfg = self.config_json.as_bytes();
        let cfg_len = u32::try_from(cfg.len())
            .map_err(|_| Error::contract("config JSON longer than u32::MAX bytes"))?;
        let floats = self.params.len() * if self.averaged.is_some() { 2 } else { 1 };
        let mut out = Vec::with_capacity(8 + 4 + cfg.len() + 8 + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&cfg_len.to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self.params.iter().chain(self.averaged.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing DAMELCKP magic".into()));
        }
        let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cfg_end = 12 + cfg_len;
        if bytes.len() < cfg_end + 8 {
            return Err(bad("truncated header".into()));
        }
        let config_json = String::from_utf8(bytes[12..cfg_end].to_vec())
            .map_err(|_| bad("config is not UTF-8".into()))?;
        let count = u64::from_le_bytes(bytes[cfg_end..cfg_end + 8].try_into().unwrap()) as usize;
        let payload = &bytes[cfg_end + 8..];
        let blocks = match payload.len().checked_div(8 * count) {
            Some(b) if payload.len() == 8 * count * b && (b == 1 || b == 2) => b,
            _ if count == 0 && payload.is_empty() => 1,
            _ => {
                return Err(bad(format!(
                    "payload of {} bytes does not hold 1 or 2 vectors of {count} floats",
                    payload.len()
                )))
            }
        };
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let params: Vec<f64> = floats.by_ref().take(count).collect();
        let averaged = (blocks == 2).then(|| floats.collect());
        Ok(Checkpoint {
            config_json,
            params,
            averaged,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
