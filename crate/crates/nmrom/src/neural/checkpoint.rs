//! Named-tensor checkpoint file, `NMCKPT v1`: magic, version, tensor count,
//! then per tensor a length-prefixed name, rank, u32 dims, little-endian f64
//! data, and a trailing CRC32 over everything before it.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NMCKPT1\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn scalar(name: &str, v: f64) -> Self {
        Self {
            name: name.to_string(),
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(name: &str, v: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            dims: vec![v.len()],
            data: v,
        }
    }
}

pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let mut hasher = crc32fast::Hasher::new();
    let mut emit = |w: &mut std::io::BufWriter<std::fs::File>, bytes: &[u8]| -> Result<()> {
        hasher.update(bytes);
        w.write_all(bytes)?;
        Ok(())
    };
    emit(&mut w, CHECKPOINT_MAGIC)?;
    emit(&mut w, &CHECKPOINT_VERSION.to_le_bytes())?;
    emit(&mut w, &(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        emit(&mut w, &(name.len() as u32).to_le_bytes())?;
        emit(&mut w, name)?;
        emit(&mut w, &(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            emit(&mut w, &(d as u32).to_le_bytes())?;
        }
        let expect: usize = t.dims.iter().product();
        if expect != t.data.len() {
            return Err(Error::Shape(format!(
                "tensor {} dims {:?} do not match {} values",
                t.name,
                t.dims,
                t.data.len()
            )));
        }
        for &v in &t.data {
            emit(&mut w, &v.to_le_bytes())?;
        }
    }
    let crc = hasher.finalize();
    w.write_all(&crc.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut hasher = crc32fast::Hasher::new();
    let mut take = |r: &mut std::io::BufReader<std::fs::File>, buf: &mut [u8]| -> Result<()> {
        r.read_exact(buf)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        hasher.update(buf);
        Ok(())
    };
    let mut magic = [0u8; 8];
    take(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint file".into()));
    }
    let mut u32buf = [0u8; 4];
    take(&mut r, &mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    take(&mut r, &mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        take(&mut r, &mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        take(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        take(&mut r, &mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            take(&mut r, &mut u32buf)?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        let volume: usize = dims.iter().product();
        let mut data = Vec::with_capacity(volume);
        let mut f64buf = [0u8; 8];
        for _ in 0..volume {
            take(&mut r, &mut f64buf)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        tensors.push(NamedTensor { name, dims, data });
    }
    let computed = hasher.finalize();
    let mut crc_bytes = [0u8; 4];
    r.read_exact(&mut crc_bytes)
        .map_err(|e| Error::Format(format!("missing checksum: {e}")))?;
    let stored = u32::from_le_bytes(crc_bytes);
    if stored != computed {
        return Err(Error::Format(format!(
            "checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    Ok(tensors)
}

/// Finds a tensor by name.
pub fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Format(format!("checkpoint misses tensor {name}")))
}
