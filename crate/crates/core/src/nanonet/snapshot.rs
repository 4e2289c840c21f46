//! On-disk snapshots: a JSON manifest next to raw little-endian f64 arrays.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{Activation, BaseModel, DeltaOverlay};
use crate::blockgrid::{BlockCoord, Grid};
use crate::error::{Error, Result};

pub fn encode_f64s(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Integrity(format!("{} bytes is not a whole number of f64 values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub dims: Vec<(usize, usize)>,
    pub block_size: usize,
    pub activations: Vec<Activation>,
    pub eligible: Vec<usize>,
    pub seed: u64,
    pub layer_files: Vec<String>,
}

pub fn save_model(base: &BaseModel, seed: u64, dir: &Path) -> Result<ModelManifest> {
    fs::create_dir_all(dir)?;
    let mut layer_files = Vec::new();
    for (i, w) in base.weights().iter().enumerate() {
        let name = format!("layer_{i}.f64");
        fs::write(dir.join(&name), encode_f64s(w.iter().copied()))?;
        layer_files.push(name);
    }
    let manifest = ModelManifest {
        dims: base.weights().iter().map(|w| w.dim()).collect(),
        block_size: base.block_size(),
        activations: base.activations().to_vec(),
        eligible: base.eligible_layers().into_iter().collect(),
        seed,
        layer_files,
    };
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_model(dir: &Path) -> Result<(BaseModel, u64)> {
    let manifest: ModelManifest = serde_json::from_slice(&read(&dir.join("model.json"))?)?;
    let mut weights = Vec::new();
    for (file, &(rows, cols)) in manifest.layer_files.iter().zip(&manifest.dims) {
        let values = decode_f64s(&read(&dir.join(file))?)?;
        let w = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::Integrity(format!("{file}: {e}")))?;
        weights.push(w);
    }
    let base = BaseModel::new(weights, manifest.activations, manifest.block_size)?.with_eligible(&manifest.eligible)?;
    Ok((base, manifest.seed))
}

/// Location of one block inside a packed overlay array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBlock {
    pub block: BlockCoord,
    pub rows: usize,
    pub cols: usize,
}

/// Concatenate overlay blocks in coordinate order.
pub fn pack_overlay(overlay: &DeltaOverlay) -> (Vec<PackedBlock>, Vec<u8>) {
    let index = overlay
        .blocks
        .iter()
        .map(|(b, m)| PackedBlock { block: *b, rows: m.nrows(), cols: m.ncols() })
        .collect();
    let bytes = encode_f64s(overlay.blocks.values().flat_map(|m| m.iter().copied().collect::<Vec<_>>()));
    (index, bytes)
}

pub fn unpack_overlay(grid: &Grid, index: &[PackedBlock], bytes: &[u8]) -> Result<DeltaOverlay> {
    let values = decode_f64s(bytes)?;
    let expected: usize = index.iter().map(|p| p.rows * p.cols).sum();
    if expected != values.len() {
        return Err(Error::Integrity(format!("overlay index covers {expected} values, data has {}", values.len())));
    }
    let mut overlay = DeltaOverlay::new();
    let mut offset = 0;
    for p in index {
        let n = p.rows * p.cols;
        let m = Array2::from_shape_vec((p.rows, p.cols), values[offset..offset + n].to_vec())
            .map_err(|e| Error::Integrity(e.to_string()))?;
        overlay.insert(grid, p.block, m)?;
        offset += n;
    }
    Ok(overlay)
}
