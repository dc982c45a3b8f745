//! Binary parameter-set format.
//!
//! ```text
//! magic   "NDIFFPS1"
//! u32     parameter count
//! repeat: u32 name length, name bytes (UTF-8),
//!         u32 rank, rank x u32 extents,
//!         product(extents) x f32 payload
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use crate::error::{NdError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PARAMS_MAGIC: &[u8; 8] = b"NDIFFPS1";

pub fn write_params(store: &ParamStore, w: &mut impl Write) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn params_to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_params(store, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| NdError::Checkpoint(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_params(r: &mut impl Read) -> Result<ParamStore> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != PARAMS_MAGIC {
        return Err(NdError::Checkpoint("bad parameter-set magic".into()));
    }
    let count = read_u32(r, "parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r, "name length")? as usize;
        if len > 1 << 16 {
            return Err(NdError::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        read_exact(r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| NdError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(r, "rank")? as usize;
        if rank > 8 {
            return Err(NdError::Checkpoint(format!("implausible rank {rank} for {name}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(r, "extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(r, &mut raw, &format!("payload of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}
