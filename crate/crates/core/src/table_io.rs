//! Flat binary layout for value tables and policy logits.
//!
//! ```text
//! magic      8 bytes  "DAWOGTBL"
//! version    u32      1
//! kind       u32      0 goal value, 1 region value, 2 policy logits
//! layout     u32 length + UTF-8 bytes
//! ndims      u32, then ndims x u64 dimensions
//! nblocks    u32, then nblocks x prod(dims) x f64 (row-major)
//! ```
//!
//! All integers and floats are little-endian. Hyperparameters live in a JSON
//! sidecar next to the binary file.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{DawogError, Result};

const MAGIC: &[u8; 8] = b"DAWOGTBL";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum TableKind {
    GoalValue = 0,
    RegionValue = 1,
    PolicyLogits = 2,
}

impl TableKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(Self::GoalValue),
            1 => Some(Self::RegionValue),
            2 => Some(Self::PolicyLogits),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableBlob {
    pub kind: TableKind,
    pub layout: String,
    pub dims: Vec<u64>,
    pub blocks: Vec<Vec<f64>>,
}

impl TableBlob {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let len: u64 = self.dims.iter().product();
        if self.blocks.iter().any(|b| b.len() as u64 != len) {
            return Err(DawogError::Shape("block length does not match dims".into()));
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.kind as u32).to_le_bytes())?;
        w.write_all(&(self.layout.len() as u32).to_le_bytes())?;
        w.write_all(self.layout.as_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(len as usize * 8);
        for block in &self.blocks {
            buf.clear();
            for v in block {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let bad = |reason: &str| DawogError::TableFormat {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        if read_u32(&mut r)? != VERSION {
            return Err(bad("unsupported version"));
        }
        let kind = TableKind::from_u32(read_u32(&mut r)?).ok_or_else(|| bad("unknown kind"))?;
        let layout_len = read_u32(&mut r)? as usize;
        if layout_len > 1024 {
            return Err(bad("layout id too long"));
        }
        let mut layout = vec![0u8; layout_len];
        r.read_exact(&mut layout)?;
        let layout = String::from_utf8(layout).map_err(|_| bad("layout id not UTF-8"))?;
        let ndims = read_u32(&mut r)? as usize;
        if ndims == 0 || ndims > 8 {
            return Err(bad("bad dimension count"));
        }
        let dims = (0..ndims).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l <= (1 << 32))
            .ok_or_else(|| bad("table too large"))? as usize;
        let nblocks = read_u32(&mut r)? as usize;
        if nblocks == 0 || nblocks > 4 {
            return Err(bad("bad block count"));
        }
        let mut blocks = Vec::with_capacity(nblocks);
        let mut raw = vec![0u8; len * 8];
        for _ in 0..nblocks {
            r.read_exact(&mut raw)?;
            blocks.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            kind,
            layout,
            dims,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file), path)
    }
}

/// Path of the JSON sidecar for a binary table file.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn write_sidecar<S: Serialize>(bin: &Path, meta: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(sidecar_path(bin), text + "\n")?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn blob_round_trips(a in 1u64..5, b in 1u64..5, vals in proptest::collection::vec(-1e6f64..1e6, 32)) {
            let len = (a * b) as usize;
            let blob = TableBlob {
                kind: TableKind::GoalValue,
                layout: "grid_wall".into(),
                dims: vec![a, b],
                blocks: vec![vals[..len].to_vec(), vals[16..16 + len].to_vec()],
            };
            let mut buf = Vec::new();
            blob.write_to(&mut buf).unwrap();
            prop_assert_eq!(buf.len(), 8 + 4 + 4 + 4 + 9 + 4 + 16 + 4 + 2 * len * 8);
            let back = TableBlob::read_from(buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, blob);
        }
    }

    #[test]
    fn header_is_little_endian() {
        let blob = TableBlob {
            kind: TableKind::PolicyLogits,
            layout: "x".into(),
            dims: vec![1],
            blocks: vec![vec![1.0]],
        };
        let mut buf = Vec::new();
        blob.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"DAWOGTBL");
        assert_eq!(&buf[8..12], &[1, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[2, 0, 0, 0]);
        assert_eq!(&buf[buf.len() - 8..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let blob = TableBlob {
            kind: TableKind::GoalValue,
            layout: "grid_wall".into(),
            dims: vec![2, 2],
            blocks: vec![vec![0.0; 4]],
        };
        let mut buf = Vec::new();
        blob.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(TableBlob::read_from(bad.as_slice(), Path::new("m")).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(TableBlob::read_from(truncated, Path::new("m")).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(TableBlob::read_from(trailing.as_slice(), Path::new("m")).is_err());
    }
}
