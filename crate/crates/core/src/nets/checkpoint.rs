//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TTAS"                     magic
//! u32                        format version
//! u32 + bytes                architecture descriptor (UTF-8)
//! u64                        training seed
//! u32 + bytes                metrics snapshot (UTF-8 `key=value` lines)
//! u64 + f32 × n              parameter payload
//! u64                        FNV-1a 64 checksum of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seed::fnv1a64;

pub const MAGIC: &[u8; 4] = b"TTAS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub params: Vec<f32>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.descriptor.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.descriptor);
        out.extend_from_slice(&self.seed.to_le_bytes());
        let metrics: String = self
            .metrics
            .iter()
            .map(|(k, v)| format!("{k}={v:?}\n"))
            .collect();
        put_str(&mut out, &metrics);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a64(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: 4,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let descriptor = r.string()?;
        let seed = r.u64()?;
        let mut metrics = BTreeMap::new();
        for line in r.string()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metrics line `{line}`")))?;
            let v = v
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad metric value `{v}`")))?;
            metrics.insert(k.to_string(), v);
        }
        let n = r.u64()? as usize;
        let payload = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("parameter count overflow".into()))?,
        )?;
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Self {
            descriptor,
            seed,
            metrics,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::storage(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
        Self::decode(&bytes)
    }
}
