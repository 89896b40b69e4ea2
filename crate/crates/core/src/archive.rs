//! Weight archive: a directory holding `manifest.txt` and `weights.bin`.
//!
//! Each manifest line is `name<TAB>shape<TAB>byte_offset`, with the shape
//! written as `AxBxC`. The blob is the concatenation of all tensors as
//! little-endian f64 in manifest order.

use std::fs;
use std::path::Path;

use crate::error::{input_err, Error, Result};
use crate::tensor::{ParamId, ParamStore};

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "weights.bin";

pub fn save(store: &ParamStore, ids: &[ParamId], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut blob = Vec::new();
    for &id in ids {
        let t = store.get(id);
        let shape: Vec<String> = t.shape.iter().map(|s| s.to_string()).collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", store.name(id), shape.join("x"), blob.len()));
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mp = dir.join(MANIFEST);
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    let bp = dir.join(BLOB);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))
}

/// Overwrites the named tensors of `store` from the archive in `dir`.
/// Returns how many tensors were loaded.
pub fn load(store: &mut ParamStore, dir: &Path) -> Result<usize> {
    let mp = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let bp = dir.join(BLOB);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let mut loaded = 0;
    for (ln, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, offset] = fields[..] else {
            return Err(Error::Parse(format!("{}:{}: expected 3 tab-separated fields", mp.display(), ln + 1)));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("{}:{}: bad shape `{shape}`", mp.display(), ln + 1))))
            .collect::<Result<_>>()?;
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Parse(format!("{}:{}: bad offset `{offset}`", mp.display(), ln + 1)))?;
        let id = store.find(name).ok_or_else(|| input_err!("archive tensor `{name}` has no counterpart"))?;
        let t = store.get_mut(id);
        if t.shape != shape {
            return Err(input_err!("archive tensor `{name}` has shape {:?}, expected {:?}", shape, t.shape));
        }
        let end = offset + 8 * t.data.len();
        let bytes = blob.get(offset..end).ok_or_else(|| input_err!("archive tensor `{name}` runs past the blob"))?;
        for (v, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        loaded += 1;
    }
    Ok(loaded)
}
