//! Flat binary model files.
//!
//! Layout (little-endian): magic `HANETCKP`, `u32` version, `u32` config length,
//! config text, 32-byte SHA-256 of the config text, `u32` entry count, then per
//! entry: `u32` name length, name, `u8` group tag, `u8` rank, `u64` extents, and
//! the values as `f64`.

use std::path::Path;

use hanet_tensor::ParamGroup;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::toyseg::model::{ToySeg, ToySegConfig};

pub const MAGIC: &[u8; 8] = b"HANETCKP";
pub const VERSION: u32 = 1;

pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn to_bytes(model: &ToySeg) -> Vec<u8> {
    let text = model.config().to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&config_digest(&text));
    let entries = model.store.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.group.tag());
        out.push(e.value.rank() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
                CoreError::Data(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the model from its stored config and overwrites every tensor.
pub fn from_bytes(buf: &[u8]) -> Result<ToySeg> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CoreError::Data("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CoreError::Data(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| CoreError::Data("checkpoint config is not UTF-8".into()))?
        .to_string();
    if r.take(32)? != config_digest(&text) {
        return Err(CoreError::Data("checkpoint config digest mismatch".into()));
    }
    let mut model = ToySeg::build(ToySegConfig::from_text(&text)?)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(CoreError::Data(format!("checkpoint has {count} tensors, model expects {}", model.store.len())));
    }
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| CoreError::Data("bad tensor name".into()))?;
        let group = ParamGroup::from_tag(r.u8()?).ok_or_else(|| CoreError::Data(format!("{name}: bad group tag")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = model.store.id(&name).ok_or_else(|| CoreError::Data(format!("unexpected tensor {name}")))?;
        let entry = model.store.entry(id);
        if entry.group != group || entry.value.shape() != shape.as_slice() {
            return Err(CoreError::Data(format!(
                "{name}: stored {group:?} {shape:?}, model has {:?} {:?}",
                entry.group,
                entry.value.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 8)?;
        let data: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.store.set_data(id, &data)?;
    }
    if r.pos != buf.len() {
        return Err(CoreError::Data(format!("{} trailing bytes in checkpoint", buf.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &ToySeg, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| CoreError::io(path, e))
}

pub fn load(path: &Path) -> Result<ToySeg> {
    let buf = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    from_bytes(&buf).map_err(|e| match e {
        CoreError::Data(m) => CoreError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
