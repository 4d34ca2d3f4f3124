//! Binary checkpoints of a [`ToyModel`].
//!
//! Layout: the 8-byte magic `LSCKPT01`, a little-endian `u64` header length,
//! a JSON header, then every block listed in the header as little-endian
//! `f64` values in row-major order.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{InitScheme, LoraLayer};
use crate::tensor::Matrix;
use crate::toy::ToyModel;

pub const MAGIC: &[u8; 8] = b"LSCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDims {
    pub d: usize,
    pub n: usize,
    pub classes: usize,
    pub r: usize,
}

impl ToyDims {
    pub fn of(model: &ToyModel) -> Self {
        Self {
            d: model.input_dim(),
            n: model.width(),
            classes: model.classes(),
            r: model.rank(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: ToyDims,
    pub scheme: Option<InitScheme>,
    pub seed: u64,
    pub step: u64,
    pub s: f64,
    pub blocks: Vec<BlockInfo>,
}

fn blocks_of(model: &ToyModel) -> Vec<(&'static str, &Matrix)> {
    let mut out: Vec<(&'static str, &Matrix)> =
        vec![("w_in", &model.w_in), ("w0", &model.hidden.w), ("w_out", &model.w_out)];
    if model.rank() > 0 {
        out.push(("a", &model.hidden.a));
        out.push(("b", &model.hidden.b));
        if let Some((b0, a0)) = model.hidden.correction_factors() {
            out.push(("b_init", b0));
            out.push(("a_init", a0));
        }
    }
    out
}

pub fn encode_checkpoint(model: &ToyModel, scheme: Option<InitScheme>, seed: u64, step: u64) -> Result<Vec<u8>> {
    let blocks = blocks_of(model);
    let header = CheckpointHeader {
        dims: ToyDims::of(model),
        scheme,
        seed,
        step,
        s: model.hidden.s,
        blocks: blocks
            .iter()
            .map(|(name, m)| BlockInfo {
                name: (*name).to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = blocks.iter().map(|(_, m)| m.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in blocks {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ToyModel,
    scheme: Option<InitScheme>,
    seed: u64,
    step: u64,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, scheme, seed, step)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ToyModel, CheckpointHeader)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::format(path, format!("truncated header: need {hlen} bytes, have {}", body.len())));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
    let mut data = &body[hlen..];
    let expected: usize = header.blocks.iter().map(|b| b.rows * b.cols * 8).sum();
    if data.len() != expected {
        return Err(Error::format(
            path,
            format!("payload size mismatch: expected {expected} bytes, found {}", data.len()),
        ));
    }
    let mut blocks = std::collections::BTreeMap::new();
    for info in &header.blocks {
        let count = info.rows * info.cols;
        let values = data[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[count * 8..];
        blocks.insert(info.name.as_str(), Matrix::new(info.rows, info.cols, values)?);
    }
    let mut take = |name: &str| {
        blocks
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing block {name:?}")))
    };
    let dims = header.dims;
    let (w_in, w0, w_out) = (take("w_in")?, take("w0")?, take("w_out")?);
    let found = (w_in.rows(), w_in.cols(), w_out.rows());
    if found != (dims.n, dims.d, dims.classes) {
        return Err(Error::format(
            path,
            format!("blocks have (n, d, classes) = {found:?} but header declares {:?}", (dims.n, dims.d, dims.classes)),
        ));
    }
    let mut model = ToyModel::from_weights(w_in, w0, w_out)?;
    if dims.r > 0 {
        let (a, b) = (take("a")?, take("b")?);
        if a.rows() != dims.r {
            return Err(Error::format(path, format!("adapter rank {} but header declares {}", a.rows(), dims.r)));
        }
        let mut layer = LoraLayer::from_parts(Arc::clone(model.w0()), a, b, header.s, false)?;
        if let (Ok(b0), Ok(a0)) = (take("b_init"), take("a_init")) {
            layer = layer.with_correction(b0, a0)?;
        }
        model = model.with_adapter(layer)?;
    }
    Ok((model, header))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ToyModel, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint and checks its `(d, n, classes)` against `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: ToyDims) -> Result<(ToyModel, CheckpointHeader)> {
    let path = path.as_ref();
    let (model, header) = load_checkpoint(path)?;
    let got = header.dims;
    if (got.d, got.n, got.classes) != (expected.d, expected.n, expected.classes) {
        return Err(Error::format(
            path,
            format!(
                "checkpoint dims (d={}, n={}, classes={}) do not match configured (d={}, n={}, classes={})",
                got.d, got.n, got.classes, expected.d, expected.n, expected.classes
            ),
        ));
    }
    Ok((model, header))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
