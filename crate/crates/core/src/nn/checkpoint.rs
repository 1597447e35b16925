//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "TSCK"
//! version u32      currently 1
//! count   u32      number of tensors
//! manifest, per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rows u64, cols u64
//!   dtype u8 (0 = f64)
//!   offset u64     byte offset into the payload section
//! payload: concatenated row-major f64 little-endian data
//! ```
//!
//! Manifest order equals the parameter store's insertion order, so a
//! load/save round trip preserves ordering bit-exactly.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

use super::ParamStore;

const MAGIC: &[u8; 4] = b"TSCK";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Serializes a parameter store to the container format.
pub fn save(params: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(params.len() as u32).to_le_bytes())?;
    let mut offset: u64 = 0;
    for (name, value) in params.iter() {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(value.nrows() as u64).to_le_bytes())?;
        f.write_all(&(value.ncols() as u64).to_le_bytes())?;
        f.write_all(&[DTYPE_F64])?;
        f.write_all(&offset.to_le_bytes())?;
        offset += (value.len() * 8) as u64;
    }
    for (_, value) in params.iter() {
        for v in value.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Loads a container written by [`save`].
pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let mut f = BufReader::new(std::fs::File::open(&path)?);
    let mut head = [0u8; 12];
    f.read_exact(&mut head)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if &head[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;

    struct Entry {
        name: String,
        rows: usize,
        cols: usize,
        offset: u64,
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len_buf = [0u8; 4];
        f.read_exact(&mut len_buf)?;
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        f.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?;
        let mut meta = [0u8; 25];
        f.read_exact(&mut meta)?;
        let rows = u64::from_le_bytes(meta[0..8].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(meta[8..16].try_into().unwrap()) as usize;
        let dtype = meta[16];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("unsupported dtype {dtype}")));
        }
        let offset = u64::from_le_bytes(meta[17..25].try_into().unwrap());
        entries.push(Entry {
            name,
            rows,
            cols,
            offset,
        });
    }

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let mut params = ParamStore::new();
    for e in entries {
        let n_bytes = e.rows * e.cols * 8;
        let start = e.offset as usize;
        let end = start + n_bytes;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} overruns payload ({} > {})",
                e.name,
                end,
                payload.len()
            )));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let arr = Array2::from_shape_vec((e.rows, e.cols), values)
            .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        params.insert(e.name, arr);
    }
    Ok(params)
}

/// SHA-256 of a checkpoint file, hex-encoded (recorded in run manifests).
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}
