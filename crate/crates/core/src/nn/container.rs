//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"EVLN"            magic
//! u32                format version (1)
//! u64                entry count
//! per entry:
//!   u16              name length in bytes
//!   [u8]             UTF-8 name
//!   u8               rank
//!   [u64; rank]      extents
//!   [f64; numel]     values, little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::{IncrementalModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"EVLN";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_container<W: Write>(mut w: W, entries: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Format(format!("entry name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("rank {} too large for {name}", t.rank())))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[rank])?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn encode(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_container(&mut buf, entries).expect("writing to a Vec cannot fail");
    buf
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated container while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad container magic {magic:02x?}")));
    }
    let mut v = [0u8; 4];
    read_exact(&mut r, &mut v, "version")?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = read_u64(&mut r, "entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let mut l = [0u8; 2];
        read_exact(&mut r, &mut l, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(l) as usize];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let e = read_u64(&mut r, "extent")?;
            shape.push(usize::try_from(e).map_err(|_| Error::Format(format!("extent {e} too large")))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("extents {shape:?} overflow")))?;
        let mut data = Vec::with_capacity(numel.min(1 << 24));
        let mut b = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut b, "values")?;
            data.push(f64::from_le_bytes(b));
        }
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    read_container(bytes)
}

impl IncrementalModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.params())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Rebuilds a model from a container. Head sizes come from the stored
    /// shapes; everything else must match `config`.
    pub fn from_bytes(config: ModelConfig, bytes: &[u8]) -> Result<Self> {
        let entries = decode(bytes)?;
        let lookup = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("container lacks {name}")))
        };
        let old = lookup("head_p.weight")?.shape().first().copied().unwrap_or(0);
        let new = lookup("head_c.weight")?.shape().first().copied().unwrap_or(0);
        let mut model = IncrementalModel::zeros(config, old, new)?;
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        if entries.len() != names.len() {
            return Err(Error::Format(format!(
                "container holds {} entries, model has {}",
                entries.len(),
                names.len()
            )));
        }
        for (slot, name) in model.params_mut().into_iter().zip(&names) {
            let stored = lookup(name)?;
            if stored.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(stored.data());
        }
        Ok(model)
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        Self::from_bytes(config, &std::fs::read(path)?)
    }
}
