//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MDVCPARM"
//! version  u32      1
//! count    u32      number of parameters
//! repeated count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank u32, dims u64 x rank
//!   values f64 x product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MDVCPARM";
pub const VERSION: u32 = 1;

/// Named tensors read from a checkpoint, in file order.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn write_params<W: Write>(mut w: W, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 8);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> NnError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        NnError::Checkpoint("truncated file".to_string())
    } else {
        NnError::Io(e)
    }
}

const MAX_VALUES: u64 = 1 << 32;

pub fn read_params<R: Read>(mut r: R) -> Result<NamedTensors> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".to_string()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 4096 {
            return Err(NnError::Checkpoint(format!("parameter name length {len} too large")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".to_string()))?;
        let rank = read_u32(&mut r)?;
        if rank > 8 {
            return Err(NnError::Checkpoint(format!("parameter `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_VALUES {
            return Err(NnError::Checkpoint(format!("parameter `{name}` is too large")));
        }
        let mut bytes = vec![0u8; numel as usize * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Loads a checkpoint into `store`. Every parameter of the store must be present
/// with a matching shape; extra checkpoint entries are an error too.
pub fn load_into(store: &mut ParamStore, tensors: NamedTensors) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store.id(&name)?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(NnError::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                p.value.shape(),
                t.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_params(std::io::BufWriter::new(f), store)
}

pub fn load(path: &Path, store: &mut ParamStore) -> Result<()> {
    let f = std::fs::File::open(path)?;
    let tensors = read_params(std::io::BufReader::new(f))?;
    load_into(store, tensors)
}
