//! Checkpoint container: named f32 tensors in a little-endian record stream.
//!
//! Layout: magic `PACK`, `u32` format version, `u32` record count, then per
//! record a length-prefixed UTF-8 name, a kind byte (0 = f32 tensor), four
//! `u32` shape extents, and a `u32` payload byte count followed by the f32
//! payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PACK";
pub const VERSION: u32 = 1;
const KIND_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let count: usize = r.shape.iter().product();
        if count != r.data.len() {
            return Err(Error::Checkpoint(format!(
                "record {} declares shape {:?} but holds {} values",
                r.name,
                r.shape,
                r.data.len()
            )));
        }
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(KIND_F32);
        for d in r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&((r.data.len() * 4) as u32).to_le_bytes());
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = cur.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint(format!("record name at byte {} is not UTF-8", cur.pos)))?
            .to_string();
        let kind = cur.take(1)?[0];
        if kind != KIND_F32 {
            return Err(Error::Checkpoint(format!(
                "record {name}: unknown kind {kind}"
            )));
        }
        let mut shape = [0usize; 4];
        for s in &mut shape {
            *s = cur.u32()? as usize;
        }
        let payload_len = cur.u32()? as usize;
        let count: usize = shape.iter().product();
        if payload_len != count * 4 {
            return Err(Error::Checkpoint(format!(
                "record {name}: payload {payload_len} bytes does not match shape {shape:?}"
            )));
        }
        let payload = cur.take(payload_len)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(Record { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last record",
            bytes.len() - cur.pos
        )));
    }
    Ok(records)
}

pub fn save(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, encode(records)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Record> {
        vec![
            Record {
                name: "conv1.weight".into(),
                shape: [2, 1, 1, 3],
                data: vec![1.0, -2.5, 0.0, f32::MIN_POSITIVE, 3.25, -0.125],
            },
            Record {
                name: "bn1.gamma".into(),
                shape: [1, 1, 1, 2],
                data: vec![1.0, 1.0],
            },
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let records = sample();
        let bytes = encode(&records).unwrap();
        assert_eq!(&bytes[..4], b"PACK");
        assert_eq!(decode(&bytes).unwrap(), records);
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));

        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&sample()).unwrap();
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn shape_payload_disagreement_is_rejected() {
        let bad = Record {
            name: "w".into(),
            shape: [1, 1, 1, 5],
            data: vec![0.0; 4],
        };
        assert!(encode(&[bad]).is_err());
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes.push(0);
        assert!(decode(&bytes).unwrap_err().to_string().contains("trailing"));
    }
}
