//! Model weights as one binary blob.
//!
//! ```text
//! b"VTOYCKPT"  magic
//! u32 LE       format version
//! u32 LE       header length
//! header       JSON: architecture, seeds, training step, tensor names and shapes
//! f64 LE ...   tensor data in header order, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToyError};
use crate::model::{ToyConfig, ToyModel};

pub const MAGIC: &[u8; 8] = b"VTOYCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ToyConfig,
    denoiser_seed: u64,
    reference_seed: u64,
    step: usize,
    tensors: Vec<TensorInfo>,
}

fn bad(msg: impl Into<String>) -> ToyError {
    ToyError::Checkpoint(msg.into())
}

pub fn write_checkpoint(mut w: impl Write, model: &ToyModel, step: usize) -> Result<()> {
    let tensors = model
        .param_sets()
        .iter()
        .flat_map(|p| p.names().iter().zip(p.values()))
        .map(|(name, v)| TensorInfo {
            name: name.clone(),
            rows: v.nrows(),
            cols: v.ncols(),
        })
        .collect();
    let header = Header {
        config: model.config(),
        denoiser_seed: model.denoiser.seed,
        reference_seed: model.reference.seed,
        step,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for set in model.param_sets() {
        for v in set.values() {
            for x in v.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Returns the model and the training step it was saved at.
pub fn read_checkpoint(mut r: impl Read) -> Result<(ToyModel, usize)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short for a checkpoint"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    let mut model = ToyModel::new(header.config, header.denoiser_seed)?;
    model.reference = crate::model::ToyReferenceEncoder::new(header.config, header.reference_seed)?;

    let mut infos = header.tensors.iter();
    for set in model.param_sets_mut() {
        let mut values = Vec::with_capacity(set.len());
        for name in set.names().to_vec() {
            let info = infos.next().ok_or_else(|| bad("checkpoint has too few tensors"))?;
            if info.name != name {
                return Err(bad(format!("expected tensor {name}, found {}", info.name)));
            }
            let mut data = vec![0u8; info.rows * info.cols * 8];
            r.read_exact(&mut data).map_err(|_| bad(format!("tensor {name} is truncated")))?;
            let floats = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            values.push(Array2::from_shape_vec((info.rows, info.cols), floats).map_err(|e| bad(e.to_string()))?);
        }
        set.assign(values)?;
    }
    if infos.next().is_some() {
        return Err(bad("checkpoint has extra tensors"));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok((model, header.step))
}

pub fn save_checkpoint(path: &Path, model: &ToyModel, step: usize) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, step)
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyModel, usize)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
