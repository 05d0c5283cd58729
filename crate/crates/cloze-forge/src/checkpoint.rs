//! Checkpoint container: a flat named-array file format ("CORF") holding
//! parameter tensors, optimizer moments, the step counter, and a config
//! fingerprint. Double-precision payloads round-trip bitwise.

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CORF";
const VERSION: u32 = 1;
/// Optimizer-state arrays carry this prefix; checkpoint averaging drops them.
pub const MOMENT_PREFIX: &str = "adam.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Parameter arrays by name, plus optimizer moments under MOMENT_PREFIX.
    pub arrays: BTreeMap<String, Tensor>,
    pub step: u64,
    pub fingerprint: u64,
}

impl Checkpoint {
    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys().filter(|n| !n.starts_with(MOMENT_PREFIX))
    }
}

/// Truncated SHA-256 of the config's canonical JSON form.
pub fn config_fingerprint<T: Serialize>(config: &T) -> u64 {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize to the container layout: magic, version, step, fingerprint,
/// array count, then per array a u32 name length, UTF-8 name, precision tag,
/// rank, extents, and the little-endian IEEE payload.
pub fn to_bytes(ckpt: &Checkpoint, precision: Precision) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u64(&mut buf, ckpt.step);
    push_u64(&mut buf, ckpt.fingerprint);
    push_u32(&mut buf, ckpt.arrays.len() as u32);
    for (name, tensor) in &ckpt.arrays {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.push(match precision {
            Precision::Single => 1,
            Precision::Double => 0,
        });
        push_u32(&mut buf, tensor.shape.len() as u32);
        for &e in &tensor.shape {
            push_u32(&mut buf, e as u32);
        }
        match precision {
            Precision::Double => {
                for &v in &tensor.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Precision::Single => {
                for &v in &tensor.data {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let step = r.u64()?;
    let fingerprint = r.u64()?;
    let count = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let e = r.u32()? as usize;
            shape.push(e);
            len *= e;
        }
        let data = match tag {
            0 => r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            1 => r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            t => return Err(Error::Format(format!("unknown precision tag {t}"))),
        };
        if arrays.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate array {name:?}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last array".into()));
    }
    Ok(Checkpoint {
        arrays,
        step,
        fingerprint,
    })
}

/// Atomic write: temp file in the target directory, then rename.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint, precision: Precision) -> Result<()> {
    let bytes = to_bytes(ckpt, precision);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

/// Load and verify the config fingerprint.
pub fn read_checkpoint_expecting(path: &Path, fingerprint: u64) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.fingerprint != fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: fingerprint,
            found: ckpt.fingerprint,
        });
    }
    Ok(ckpt)
}
