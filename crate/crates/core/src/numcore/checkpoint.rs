//! Named-array checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CROSSCKP"
//! version  u32      1
//! count    u32      number of arrays
//! repeated count times, in name order:
//!   name_len u32, name UTF-8 bytes
//!   rank     u32
//!   dims     rank × u64
//!   data     product(dims) × f32, row-major
//! ```
//!
//! Values are stored as `f32` (round-to-nearest from the in-memory `f64`).
//! Loading widens exactly, so save → load → save reproduces the file bit
//! for bit.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CROSSCKP";
pub const VERSION: u32 = 1;

pub fn write_to<W: Write>(store: &ParamStore, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, m) in store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&2u32.to_le_bytes())?;
        out.write_all(&(m.rows() as u64).to_le_bytes())?;
        out.write_all(&(m.cols() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(m.len() * 4);
        for &v in m.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_to(store, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_from<R: Read>(mut input: R) -> Result<ParamStore> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| bad("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        if name_len > 4096 {
            return Err(bad(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("array name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)?;
        let dims: Vec<u64> = (0..rank)
            .map(|_| read_u64(&mut input))
            .collect::<io::Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n as usize),
            [r, c] => (*r as usize, *c as usize),
            _ => return Err(bad(format!("array `{name}` has unsupported rank {rank}"))),
        };
        let mut raw = vec![0u8; rows * cols * 4];
        input
            .read_exact(&mut raw)
            .map_err(|_| bad(format!("array `{name}` is truncated")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if store.contains(&name) {
            return Err(bad(format!("duplicate array `{name}`")));
        }
        store.insert(name, Matrix::new(rows, cols, data)?);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    read_from(bytes.as_slice())
}

/// Loads a checkpoint and verifies it matches the layout of `expected`.
pub fn load_matching(path: &Path, expected: &ParamStore) -> Result<ParamStore> {
    let store = load(path)?;
    expected.check_layout(&store).map_err(|e| match e {
        Error::InvalidShape(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(store)
}
