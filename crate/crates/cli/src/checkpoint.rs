//! Checksummed named-tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "PDX1" | version u16 | count u32 | entries... | crc32 u32
//! entry: name_len u32 | name (UTF-8) | dtype u8 | rank u8 | dims u32 × rank | values
//! ```
//!
//! Dtype tags: 0 = f64, 1 = f32. The CRC covers every byte before it.
//! 64-bit entries round-trip bit-exactly; 32-bit entries are a lossy,
//! per-entry-flagged storage option.

use crate::error::CliError;
use pdx_tensor::{Parameterized, Tensor};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"PDX1";
pub const VERSION: u16 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64 (lossless for f64 entries, exact for f32).
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Corrupt(msg.into())
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<(), CliError> {
    let mut seen = std::collections::BTreeSet::new();
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(corrupt(format!("duplicate tensor name '{}' in checkpoint", e.name)));
        }
        let expect: usize = e.dims.iter().product();
        if e.dims.len() > MAX_RANK || expect != e.payload.len() {
            return Err(corrupt(format!(
                "tensor '{}': dims {:?} do not describe {} values",
                e.name,
                e.dims,
                e.payload.len()
            )));
        }
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        match &e.payload {
            Payload::F64(_) => buf.push(DTYPE_F64),
            Payload::F32(_) => buf.push(DTYPE_F32),
        }
        buf.push(e.dims.len() as u8);
        for &d in &e.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &e.payload {
            Payload::F64(v) => {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::F32(v) => {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf).map_err(|e| corrupt(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt("truncated checkpoint file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CliError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<Vec<Entry>, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| corrupt(format!("reading {}: {e}", path.display())))?;
    if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
        return Err(corrupt("truncated checkpoint file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(corrupt(format!(
            "checkpoint CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }

    let mut c = Cursor { bytes: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| corrupt("tensor name is not UTF-8"))?;
        if !seen.insert(name.clone()) {
            return Err(corrupt(format!("duplicate tensor name '{name}' in checkpoint")));
        }
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        if rank > MAX_RANK {
            return Err(corrupt(format!("tensor '{name}': rank {rank} out of range")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let payload = match dtype {
            DTYPE_F64 => {
                let raw = c.take(len * 8)?;
                Payload::F64(
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                        .collect(),
                )
            }
            DTYPE_F32 => {
                let raw = c.take(len * 4)?;
                Payload::F32(
                    raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
                )
            }
            other => return Err(corrupt(format!("tensor '{name}': unknown dtype tag {other}"))),
        };
        entries.push(Entry { name, dims, payload });
    }
    if c.pos != body.len() {
        return Err(corrupt("trailing bytes after last checkpoint entry"));
    }
    Ok(entries)
}

/// Save every parameter of a model as an f64 entry, in visit order.
pub fn save_params(path: &Path, model: &dyn Parameterized) -> Result<(), CliError> {
    let mut entries = Vec::new();
    model.visit(&mut |name, t| {
        entries.push(Entry {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            payload: Payload::F64(t.values().to_vec()),
        });
    });
    save(path, &entries)
}

/// Load parameters into a model built with the matching configuration. The
/// file must contain exactly the model's parameter set with matching shapes.
pub fn load_params(path: &Path, model: &mut dyn Parameterized) -> Result<(), CliError> {
    let entries = load(path)?;
    let mut by_name: BTreeMap<String, Entry> = entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    let mut failure: Option<String> = None;
    model.visit_mut(&mut |name, t: &mut Tensor| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(name) {
            Some(e) => {
                if e.dims != t.shape() {
                    failure = Some(format!(
                        "tensor '{name}': checkpoint shape {:?} does not match model shape {:?}",
                        e.dims,
                        t.shape()
                    ));
                    return;
                }
                t.values_mut().copy_from_slice(&e.payload.to_f64());
            }
            None => failure = Some(format!("checkpoint is missing tensor '{name}'")),
        }
    });
    if let Some(msg) = failure {
        return Err(corrupt(msg));
    }
    if let Some(name) = by_name.keys().next() {
        return Err(corrupt(format!("checkpoint has unexpected tensor '{name}'")));
    }
    Ok(())
}
