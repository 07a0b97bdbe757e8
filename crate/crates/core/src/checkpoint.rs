//! Binary checkpoints: the resolved run configuration plus named parameters.
//!
//! Layout (little-endian): magic `CDMCKPT1`, `u32` version, `u32` length and
//! UTF-8 bytes of the config text, `u32` parameter count, then per parameter
//! a `u32` name length, the name, and the tensor in `.tsr` form. Values are
//! stored as `f64`, so a reload is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::CdMamba;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CDMCKPT1";
pub const VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r)?;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

pub fn write_checkpoint<W: Write>(mut w: W, cfg: &RunConfig, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let text = cfg.to_text();
    write_u32(&mut w, text.len())?;
    w.write_all(text.as_bytes())?;
    write_u32(&mut w, store.len())?;
    for p in store.iter() {
        write_u32(&mut w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        p.value.write_tsr(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// The stored configuration and `(name, tensor)` pairs in file order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(RunConfig, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a checkpoint header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let cfg = RunConfig::parse(&read_string(&mut r, "config")?)?;
    let count = read_u32(&mut r)?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = read_string(&mut r, "parameter name")?;
        params.push((name, Tensor::read_tsr(&mut r)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last parameter".into()));
    }
    Ok((cfg, params))
}

/// Copies stored tensors into `store`, requiring the same names and shapes.
pub fn load_into(store: &mut ParamStore, params: Vec<(String, Tensor)>) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            params.len(),
            store.len()
        )));
    }
    for (name, value) in params {
        let id = store
            .lookup(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter `{name}` not in model")))?;
        let slot = store.get_mut(id);
        if slot.shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}`: model expects {:?}, checkpoint has {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
    }
    Ok(())
}

pub fn save(path: &Path, cfg: &RunConfig, store: &ParamStore) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), cfg, store)
}

/// Rebuilds the model described by the checkpoint and loads its weights.
pub fn load(path: &Path) -> Result<(RunConfig, CdMamba, ParamStore)> {
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let (cfg, params) = read_checkpoint(BufReader::new(file))?;
    let (model, mut store) = CdMamba::new(&cfg.model, cfg.train.seed)?;
    load_into(&mut store, params)?;
    Ok((cfg, model, store))
}
