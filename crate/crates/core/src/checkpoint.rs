//! Binary checkpoint container shared by the denoiser and the oracle.
//!
//! ```text
//! magic      8 bytes  "MSKDIFF\0"
//! version    u32
//! kind       u8       1 = denoiser, 2 = oracle
//! digest     32 bytes SHA-256 of the config JSON
//! step       u64
//! rng        u64 seed, u64 stream
//! adam count u64
//! config     u64 length + UTF-8 JSON
//! sections   u32 count, then per section: u32 name length + name,
//!            u64 value count + f64 values
//! checksum   32 bytes SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pnm::write_atomic;
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"MSKDIFF\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Denoiser,
    Oracle,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            Self::Denoiser => 1,
            Self::Oracle => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Self::Denoiser),
            2 => Ok(Self::Oracle),
            _ => Err(Error::Checkpoint(format!("unknown kind tag {tag}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_json: String,
    pub step: u64,
    pub rng: RngState,
    pub adam_count: u64,
    pub sections: Vec<(String, Vec<f64>)>,
}

pub fn digest_of(json: &str) -> [u8; 32] {
    Sha256::digest(json.as_bytes()).into()
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            kind,
            config_json: serde_json::to_string(config)?,
            step: 0,
            rng: RngState::new(0),
            adam_count: 0,
            sections: Vec::new(),
        })
    }

    pub fn config_digest(&self) -> [u8; 32] {
        digest_of(&self.config_json)
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_str(&self.config_json)?)
    }

    pub fn with_section(mut self, name: &str, values: Vec<f64>) -> Self {
        self.sections.push((name.to_string(), values));
        self
    }

    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name:?}")))
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.kind.tag());
        b.extend_from_slice(&self.config_digest());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.rng.seed.to_le_bytes());
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.adam_count.to_le_bytes());
        b.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config_json.as_bytes());
        b.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, values) in &self.sections {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum: [u8; 32] = Sha256::digest(&b).into();
        b.extend_from_slice(&sum);
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if body[..MAGIC.len()] != MAGIC[..] {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let actual: [u8; 32] = Sha256::digest(body).into();
        if actual[..] != sum[..] {
            return Err(Error::Checkpoint("checksum mismatch (corrupted or truncated file)".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = CheckpointKind::from_tag(r.take(1)?[0])?;
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
        };
        let adam_count = r.u64()?;
        let len = r.u64()? as usize;
        let config_json = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        if digest_of(&config_json) != digest {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?;
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad length".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            sections.push((name, values));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after the last section".into()));
        }
        Ok(Self {
            kind,
            config_json,
            step,
            rng,
            adam_count,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Loads and checks the kind tag.
    pub fn load_kind(path: &Path, kind: CheckpointKind) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a {:?} checkpoint, expected {kind:?}",
                path.display(),
                ck.kind
            )));
        }
        Ok(ck)
    }

    /// Fails unless the stored config digest equals that of `expected`.
    pub fn verify_config(&self, expected: &impl Serialize) -> Result<()> {
        let json = serde_json::to_string(expected)?;
        if digest_of(&json) != self.config_digest() {
            return Err(Error::Checkpoint("config digest does not match the requested run".into()));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
