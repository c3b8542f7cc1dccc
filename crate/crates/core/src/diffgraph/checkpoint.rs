//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic "PRGCKPT\0" | u32 version
//! str kind
//! u32 n_hashes  { str name | u64 hash }*
//! u32 n_meta    { str key  | str value }*
//! u64 seed
//! u32 n_params  { str name | u32 rows | u32 cols | f64 × rows·cols }*
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{DiffError, Matrix, ParamSet, Result};
use crate::features::SpaceHash;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model kind tag, e.g. `"L0"` or `"S0"`.
    pub kind: String,
    /// Content hashes of the vocabulary / feature spaces the model was built on.
    pub hashes: BTreeMap<String, SpaceHash>,
    pub meta: BTreeMap<String, String>,
    pub params: ParamSet,
}

fn bad(msg: impl Into<String>) -> DiffError {
    DiffError::Checkpoint(msg.into())
}

fn put_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(bad(format!("string length {len} is implausible")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| bad(e.to_string()))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        put_str(&mut out, &self.kind)?;
        out.write_all(&(self.hashes.len() as u32).to_le_bytes())?;
        for (name, hash) in &self.hashes {
            put_str(&mut out, name)?;
            out.write_all(&hash.0.to_le_bytes())?;
        }
        out.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        out.write_all(&self.params.seed().to_le_bytes())?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (_, name, m) in self.params.iter() {
            put_str(&mut out, name)?;
            out.write_all(&(m.rows() as u32).to_le_bytes())?;
            out.write_all(&(m.cols() as u32).to_le_bytes())?;
            for v in m.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = get_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let kind = get_str(&mut input)?;
        let mut hashes = BTreeMap::new();
        for _ in 0..get_u32(&mut input)? {
            let name = get_str(&mut input)?;
            hashes.insert(name, SpaceHash(get_u64(&mut input)?));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..get_u32(&mut input)? {
            let k = get_str(&mut input)?;
            meta.insert(k, get_str(&mut input)?);
        }
        let seed = get_u64(&mut input)?;
        let n = get_u32(&mut input)?;
        let mut mats = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = get_str(&mut input)?;
            let rows = get_u32(&mut input)? as usize;
            let cols = get_u32(&mut input)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            mats.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            kind,
            hashes,
            meta,
            params: ParamSet::from_matrices(seed, mats)?,
        })
    }

    /// Check that every expected space hash is recorded and matches.
    pub fn validate(&self, expected: &[(&str, SpaceHash)]) -> Result<()> {
        for &(name, hash) in expected {
            match self.hashes.get(name) {
                Some(&found) if found == hash => {}
                Some(&found) => {
                    return Err(DiffError::HashMismatch {
                        name: name.to_string(),
                        expected: hash,
                        found,
                    })
                }
                None => return Err(bad(format!("no {name} hash recorded"))),
            }
        }
        Ok(())
    }
}
