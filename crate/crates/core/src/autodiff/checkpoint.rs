//! Checkpoint serialization.
//!
//! Layout: a little-endian u32 header length, a JSON header, then a packed
//! little-endian f64 payload. The header lists parameter names and shapes in
//! payload order, an arbitrary JSON `meta` blob for the caller, and an
//! optional optimizer section; when the optimizer is present the payload
//! continues with first- and second-moment tensors in the same order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    params: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerEntry>,
}

/// A loaded checkpoint, not yet bound to any model.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

pub fn save(
    path: impl AsRef<Path>,
    store: &ParamStore,
    optimizer: Option<&AdamW>,
    meta: serde_json::Value,
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        meta,
        params: store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                rows: p.value.rows,
                cols: p.value.cols,
            })
            .collect(),
        optimizer: optimizer.map(|o| OptimizerEntry { step: o.step_count() }),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, p) in store.iter() {
        write_tensor(&mut w, &p.value)?;
    }
    if let Some(opt) = optimizer {
        let (m, v) = opt.moments();
        for t in m {
            write_tensor(&mut w, t)?;
        }
        for t in v {
            write_tensor(&mut w, t)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (supported: {FORMAT_VERSION})",
            header.format_version
        )));
    }

    let mut params = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let t = read_tensor(&mut r, e.rows, e.cols)
            .map_err(|err| Error::Checkpoint(format!("payload truncated at {:?}: {err}", e.name)))?;
        params.push((e.name.clone(), t));
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(o) => {
            let mut m = Vec::with_capacity(header.params.len());
            for e in &header.params {
                m.push(read_tensor(&mut r, e.rows, e.cols).map_err(|err| {
                    Error::Checkpoint(format!("optimizer payload truncated: {err}"))
                })?);
            }
            let mut v = Vec::with_capacity(header.params.len());
            for e in &header.params {
                v.push(read_tensor(&mut r, e.rows, e.cols).map_err(|err| {
                    Error::Checkpoint(format!("optimizer payload truncated: {err}"))
                })?);
            }
            Some(OptimizerState { step: o.step, m, v })
        }
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(Checkpoint { meta: header.meta, params, optimizer })
}

/// Copy checkpoint tensors into a freshly built store, verifying that names
/// and shapes match the registration exactly (no missing, no extra).
pub fn restore_into(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (name, tensor) in &ckpt.params {
        let id = store
            .lookup(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        let p = store.get_mut(id);
        if p.value.rows != tensor.rows || p.value.cols != tensor.cols {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name:?}: checkpoint {}x{}, model {}x{}",
                tensor.rows, tensor.cols, p.value.rows, p.value.cols
            )));
        }
        p.value = tensor.clone();
    }
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, rows: usize, cols: usize) -> Result<Tensor> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor { rows, cols, data })
}
