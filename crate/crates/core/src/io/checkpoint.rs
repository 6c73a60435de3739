//! Binary parameter files.
//!
//! Layout, little-endian: the magic `SPOTCKPT1`, a `u64` tensor count, then
//! per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `rank`
//! `u64` dimensions and the `f64` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"SPOTCKPT1";

pub fn encode(stores: &[&ParamStore]) -> Result<Vec<u8>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = MAGIC.to_vec();
    let count: usize = stores.iter().map(|s| s.len()).sum();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for store in stores {
        for (name, t) in store.iter() {
            if !seen.insert(name.to_string()) {
                return Err(Error::Contract(format!("parameter `{name}` appears in two stores")));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save(path: &Path, stores: &[&ParamStore]) -> Result<()> {
    fs::write(path, encode(stores)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Load(format!("truncated checkpoint at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Load(format!("size {v} does not fit in memory")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Load("not a checkpoint (bad magic)".into()));
    }
    let mut c = Cursor { bytes, at: MAGIC.len() };
    let count = c.u64()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Load("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()?;
        let shape: Vec<usize> = (0..rank).map(|_| c.u64()).collect::<Result<_>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Load(format!("`{name}` has an impossible shape {shape:?}")))?;
        let raw = c.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Load("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Load(e.to_string()))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Load(format!("duplicate parameter `{name}`")));
        }
    }
    if c.at != bytes.len() {
        return Err(Error::Load(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok(out)
}

/// Overwrites every parameter of `stores` with the same-named tensor from
/// the file. Names absent from the file or with a different shape are load
/// errors; extra tensors in the file are ignored.
pub fn load_into(path: &Path, stores: &mut [&mut ParamStore]) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let tensors = decode(&bytes)?;
    // validate everything first so a failed load leaves the stores untouched
    for store in stores.iter() {
        for (name, t) in store.iter() {
            let found = tensors
                .get(name)
                .ok_or_else(|| Error::Load(format!("{}: missing parameter `{name}`", path.display())))?;
            if found.shape() != t.shape() {
                return Err(Error::Load(format!(
                    "{}: `{name}` has shape {:?}, model expects {:?}",
                    path.display(),
                    found.shape(),
                    t.shape()
                )));
            }
        }
    }
    for store in stores.iter_mut() {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let value = tensors[store.name(id)].clone();
            *store.get_mut(id) = value;
        }
    }
    Ok(())
}
