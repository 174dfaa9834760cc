//! The `LPBF` container shared by every artifact kind.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | field                                          |
//! |--------------|------------------------------------------------|
//! | 4            | magic `LPBF`                                   |
//! | 2            | format version (u16)                           |
//! | 1            | kind tag (u8)                                  |
//! | 4 + m        | metadata length (u32) and UTF-8 JSON text      |
//! | 4            | payload block count (u32)                      |
//! | per block    | element count (u64) and that many f32 values   |
//!
//! Nothing follows the last block. The checksum of a file is FNV-1a 64 over
//! its complete byte stream.

use std::fs;
use std::io::Write;
use std::path::Path;

use lpb_core::fnv;
use serde_json::Value;

pub const MAGIC: &[u8; 4] = b"LPBF";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Dataset,
    Policy,
    Dynamics,
    Index,
    Report,
}

impl Kind {
    pub const ALL: [Kind; 5] = [Kind::Dataset, Kind::Policy, Kind::Dynamics, Kind::Index, Kind::Report];

    pub fn tag(self) -> u8 {
        match self {
            Kind::Dataset => 1,
            Kind::Policy => 2,
            Kind::Dynamics => 3,
            Kind::Index => 4,
            Kind::Report => 5,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == t)
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Dataset => "dataset",
            Kind::Policy => "policy",
            Kind::Dynamics => "dynamics",
            Kind::Index => "index",
            Kind::Report => "report",
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic at byte 0: found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {found} at byte 4 (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("unknown kind tag {tag} at byte 6")]
    UnknownKind { tag: u8 },
    #[error("expected a {expected} artifact, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("truncated at byte {offset}: need {expected} bytes, file has {actual}")]
    Truncated { offset: usize, expected: usize, actual: usize },
    #[error("metadata at byte {offset}: {msg}")]
    Metadata { offset: usize, msg: String },
    #[error("shape mismatch at byte {offset}: {msg}")]
    Shape { offset: usize, msg: String },
    #[error("{count} trailing bytes after the last block at byte {offset}")]
    Trailing { offset: usize, count: usize },
}

impl FormatError {
    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad-magic",
            FormatError::Version { .. } => "version",
            FormatError::UnknownKind { .. } => "unknown-kind",
            FormatError::WrongKind { .. } => "wrong-kind",
            FormatError::Truncated { .. } => "truncated",
            FormatError::Metadata { .. } => "metadata",
            FormatError::Shape { .. } => "shape",
            FormatError::Trailing { .. } => "trailing",
        }
    }
}

/// A decoded container: kind, JSON metadata and float blocks, plus the
/// byte offset at which each block's values begin.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub meta: Value,
    pub blocks: Vec<Vec<f32>>,
    pub block_offsets: Vec<usize>,
}

impl Container {
    pub fn new(kind: Kind, meta: Value, blocks: Vec<Vec<f32>>) -> Self {
        Self {
            kind,
            meta,
            blocks,
            block_offsets: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("JSON values always serialize");
        let payload: usize = self.blocks.iter().map(|b| 8 + 4 * b.len()).sum();
        let mut out = Vec::with_capacity(15 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            for v in b {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic.to_vec() });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(FormatError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let tag = r.take(1)?[0];
        let kind = Kind::from_tag(tag).ok_or(FormatError::UnknownKind { tag })?;
        let mlen = r.u32()? as usize;
        let moff = r.pos;
        let meta: Value = serde_json::from_slice(r.take(mlen)?).map_err(|e| FormatError::Metadata {
            offset: moff,
            msg: format!("not valid JSON: {e}"),
        })?;
        let nblocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(nblocks.min(1 << 16));
        let mut block_offsets = Vec::with_capacity(nblocks.min(1 << 16));
        for _ in 0..nblocks {
            let n = r.u64()? as usize;
            let off = r.pos;
            let need = n.checked_mul(4).ok_or(FormatError::Truncated {
                offset: off,
                expected: usize::MAX,
                actual: bytes.len(),
            })?;
            let raw = r.take(need)?;
            blocks.push(raw.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap()))).collect());
            block_offsets.push(off);
        }
        if r.pos != bytes.len() {
            return Err(FormatError::Trailing {
                offset: r.pos,
                count: bytes.len() - r.pos,
            });
        }
        Ok(Self {
            kind,
            meta,
            blocks,
            block_offsets,
        })
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<(), FormatError> {
        if self.kind != kind {
            return Err(FormatError::WrongKind {
                expected: kind.name(),
                found: self.kind.name(),
            });
        }
        Ok(())
    }

    /// Byte offset of block `i`, or of the payload start when unknown.
    pub fn offset_of(&self, i: usize) -> usize {
        self.block_offsets.get(i).copied().unwrap_or(0)
    }

    /// Checks that block `i` exists and holds `len` values.
    pub fn check_block(&self, i: usize, len: usize, what: &str) -> Result<&[f32], FormatError> {
        let b = self.blocks.get(i).ok_or_else(|| FormatError::Shape {
            offset: self.block_offsets.last().copied().unwrap_or(0),
            msg: format!("missing block {i} ({what}); file has {}", self.blocks.len()),
        })?;
        if b.len() != len {
            return Err(FormatError::Shape {
                offset: self.offset_of(i),
                msg: format!("block {i} ({what}) declares {len} values, payload has {}", b.len()),
            });
        }
        Ok(b)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated {
            offset: self.pos,
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn checksum(bytes: &[u8]) -> u64 {
    fnv::hash(bytes)
}

/// Writes `bytes` to a temporary file beside `path`, syncs it and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_of_empty_container() {
        let c = Container::new(Kind::Index, Value::Null, vec![]);
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"LPBF");
        assert_eq!(b[6], 4);
        assert_eq!(b.len(), 4 + 2 + 1 + 4 + 4 + 4);
        assert_eq!(Container::from_bytes(&b).unwrap().kind, Kind::Index);
    }

    #[test]
    fn nan_payload_bits_survive() {
        let odd = f32::from_bits(0x7fc0_1234);
        let c = Container::new(Kind::Dynamics, serde_json::json!({}), vec![vec![odd, -0.0]]);
        let d = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(d.blocks[0][0].to_bits(), 0x7fc0_1234);
        assert_eq!(d.blocks[0][1].to_bits(), (-0.0f32).to_bits());
    }
}
