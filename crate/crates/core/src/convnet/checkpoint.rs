//! Binary checkpoint container.
//!
//! Layout: `b"CSPK"`, `u32` version, `u64` header length, a JSON header, then
//! each named block as `u32` name length, UTF-8 name, `u64` value count and
//! that many little-endian `f32` values. Blocks follow declaration order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::connectivity::{ArchSpec, ConnectivityMask};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::network::Network;

const MAGIC: &[u8; 4] = b"CSPK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: ArchSpec,
    pub masks: Vec<ConnectivityMask>,
    pub seed: u64,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: u64,
}

pub fn encode<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let blocks = net.state_blocks();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        arch: net.arch().clone(),
        masks: net.masks(),
        seed: net.seed(),
        blocks: blocks
            .iter()
            .map(|(name, v)| BlockInfo {
                name: name.clone(),
                len: v.len() as u64,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, values) in &blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} while reading {what}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible {what} {n}")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = c.len("header length")?;
    let header: CheckpointHeader = serde_json::from_slice(c.take(hlen, "header")?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for info in &header.blocks {
        let nlen = c.u32("block name length")? as usize;
        let name = std::str::from_utf8(c.take(nlen, "block name")?)
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?
            .to_string();
        let count = c.len("block length")?;
        if name != info.name || count as u64 != info.len {
            return Err(Error::Checkpoint(format!(
                "block {name} ({count}) disagrees with header entry {} ({})",
                info.name, info.len
            )));
        }
        let raw = c.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
            &name,
        )?;
        let values = raw
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        blocks.push((name, values));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    let mut net = Network::new(&header.arch, header.masks, header.seed)
        .map_err(|e| Error::Checkpoint(format!("inconsistent header: {e}")))?;
    net.load_state_blocks(&blocks)?;
    Ok(net)
}

pub fn save<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&encode(net))?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
