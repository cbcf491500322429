//! Flow checkpoints: raw little-endian f64 parameters plus a JSON sidecar
//! describing the layer layout, so a checkpoint can be inspected or loaded
//! without guessing shapes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow_model::{CouplingLayer, FlowTransform, LayerKind, MlpParams, HIDDEN};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint is inconsistent: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// element offset into the f64 buffer
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerEntry {
    index: usize,
    kind: LayerKind,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    hidden: usize,
    n_params: usize,
    layers: Vec<LayerEntry>,
}

const FORMAT: &str = "lensflow-flow-v1";

fn push_mlp(
    prefix: &str,
    m: &MlpParams,
    buf: &mut Vec<f64>,
    tensors: &mut Vec<TensorEntry>,
) {
    let fields: [(&str, &[f64], Vec<usize>); 4] = [
        ("w1", &m.w1, vec![HIDDEN, m.d_in]),
        ("b1", &m.b1, vec![HIDDEN]),
        ("w2", &m.w2, vec![m.d_out, HIDDEN]),
        ("b2", &m.b2, vec![m.d_out]),
    ];
    for (name, data, shape) in fields {
        tensors.push(TensorEntry {
            name: format!("{prefix}.{name}"),
            shape,
            offset: buf.len(),
        });
        buf.extend_from_slice(data);
    }
}

/// Write `params.bin` and `manifest.json` into `dir` (created if needed).
pub fn save_checkpoint(dir: &Path, flow: &FlowTransform) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut buf: Vec<f64> = Vec::with_capacity(flow.n_params());
    let mut layers = Vec::with_capacity(flow.layers.len());
    for (index, layer) in flow.layers.iter().enumerate() {
        let mut tensors = Vec::with_capacity(8);
        push_mlp("scale", &layer.scale, &mut buf, &mut tensors);
        push_mlp("translate", &layer.translate, &mut buf, &mut tensors);
        layers.push(LayerEntry {
            index,
            kind: layer.kind,
            tensors,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        hidden: HIDDEN,
        n_params: buf.len(),
        layers,
    };
    let mut bytes = Vec::with_capacity(buf.len() * 8);
    for v in &buf {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(dir.join(PARAMS_FILE))?;
    f.write_all(&bytes)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn take<'a>(
    buf: &'a [f64],
    tensors: &[TensorEntry],
    name: &str,
    len: usize,
) -> Result<&'a [f64], CheckpointError> {
    let entry = tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {name}")))?;
    let numel: usize = entry.shape.iter().product();
    if numel != len || entry.offset + len > buf.len() {
        return Err(CheckpointError::Corrupt(format!(
            "tensor {name} has shape {:?}, expected {len} elements",
            entry.shape
        )));
    }
    Ok(&buf[entry.offset..entry.offset + len])
}

/// Load a flow saved by [`save_checkpoint`]; the roundtrip is bit-exact.
pub fn load_checkpoint(dir: &Path) -> Result<FlowTransform, CheckpointError> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Corrupt(format!(
            "unknown format {}",
            manifest.format
        )));
    }
    if manifest.hidden != HIDDEN {
        return Err(CheckpointError::Corrupt(format!(
            "hidden width {} does not match the build ({HIDDEN})",
            manifest.hidden
        )));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    if bytes.len() != manifest.n_params * 8 {
        return Err(CheckpointError::Corrupt(format!(
            "params.bin holds {} bytes, manifest says {}",
            bytes.len(),
            manifest.n_params * 8
        )));
    }
    let buf: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        if entry.index != i {
            return Err(CheckpointError::Corrupt(format!(
                "layer {i} recorded as index {}",
                entry.index
            )));
        }
        let mut layer = CouplingLayer::zeros(entry.kind);
        for (prefix, m) in [
            ("scale", &mut layer.scale),
            ("translate", &mut layer.translate),
        ] {
            let w1 = take(&buf, &entry.tensors, &format!("{prefix}.w1"), m.w1.len())?;
            m.w1.copy_from_slice(w1);
            let b1 = take(&buf, &entry.tensors, &format!("{prefix}.b1"), m.b1.len())?;
            m.b1.copy_from_slice(b1);
            let w2 = take(&buf, &entry.tensors, &format!("{prefix}.w2"), m.w2.len())?;
            m.w2.copy_from_slice(w2);
            let b2 = take(&buf, &entry.tensors, &format!("{prefix}.b2"), m.b2.len())?;
            m.b2.copy_from_slice(b2);
        }
        layers.push(layer);
    }
    // zeros(n) produced alternating kinds; respect the manifest instead
    Ok(FlowTransform { layers })
}
