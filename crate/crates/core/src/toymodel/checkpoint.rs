//! Checkpoint format: a JSON header next to a raw blob of little-endian `f64`.
//!
//! The header carries the [`ModelSpec`], each layer's projection layout and a
//! tensor table (`name`, `rows`, `cols`, `offset` in scalars). Tensors are
//! stored row-major, concatenated in table order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::Matrix;
use crate::rope::RetainedIndex;
use crate::toymodel::{AttentionLayer, KeyProjection, Model, ModelSpec, ValueProjection};

const FORMAT: &str = "raplab-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KeyLayout {
    Dense,
    Factored { rank: usize },
    Pruned { retained: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ValueLayout {
    Dense,
    Factored { rank: usize },
    Absorbed { rank: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub key: KeyLayout,
    pub value: ValueLayout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub layers: Vec<LayerLayout>,
    /// File name of the blob, relative to the header.
    pub blob: String,
    pub byte_order: String,
    pub tensors: Vec<TensorEntry>,
}

fn tensors(model: &Model) -> Vec<(String, &Matrix)> {
    let mut out = vec![("embedding".to_string(), &model.embedding)];
    for (l, layer) in model.layers.iter().enumerate() {
        match &layer.key {
            KeyProjection::Dense { w_q, w_k } => {
                out.push((format!("layers.{l}.w_q"), w_q));
                out.push((format!("layers.{l}.w_k"), w_k));
            }
            KeyProjection::Factored { w_q, a_k, b_k } => {
                out.push((format!("layers.{l}.w_q"), w_q));
                out.push((format!("layers.{l}.a_k"), a_k));
                for (g, b) in b_k.iter().enumerate() {
                    out.push((format!("layers.{l}.b_k.{g}"), b));
                }
            }
            KeyProjection::Pruned { w_q, a_k, .. } => {
                out.push((format!("layers.{l}.w_q"), w_q));
                out.push((format!("layers.{l}.a_k"), a_k));
            }
        }
        match &layer.value {
            ValueProjection::Dense { w_v, w_o } => {
                out.push((format!("layers.{l}.w_v"), w_v));
                out.push((format!("layers.{l}.w_o"), w_o));
            }
            ValueProjection::Factored { a_v, b_v, w_o } => {
                out.push((format!("layers.{l}.a_v"), a_v));
                for (g, b) in b_v.iter().enumerate() {
                    out.push((format!("layers.{l}.b_v.{g}"), b));
                }
                out.push((format!("layers.{l}.w_o"), w_o));
            }
            ValueProjection::Absorbed { a_v, w_o, .. } => {
                out.push((format!("layers.{l}.a_v"), a_v));
                out.push((format!("layers.{l}.w_o"), w_o));
            }
        }
    }
    out
}

fn layout(layer: &AttentionLayer) -> LayerLayout {
    let key = match &layer.key {
        KeyProjection::Dense { .. } => KeyLayout::Dense,
        KeyProjection::Factored { b_k, .. } => KeyLayout::Factored { rank: b_k[0].rows() },
        KeyProjection::Pruned { retained, .. } => KeyLayout::Pruned {
            retained: retained.iter().map(|r| r.pairs().to_vec()).collect(),
        },
    };
    let value = match &layer.value {
        ValueProjection::Dense { .. } => ValueLayout::Dense,
        ValueProjection::Factored { b_v, .. } => ValueLayout::Factored { rank: b_v[0].rows() },
        ValueProjection::Absorbed { rank, .. } => ValueLayout::Absorbed { rank: *rank },
    };
    LayerLayout { key, value }
}

fn blob_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

/// Writes `header_path` (JSON) and a sibling `.bin` blob.
pub fn save_checkpoint(model: &Model, header_path: &Path) -> Result<CheckpointHeader> {
    model.validate()?;
    let blob = blob_path(header_path);
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (name, m) in tensors(model) {
        entries.push(TensorEntry { name, rows: m.rows(), cols: m.cols(), offset });
        offset += m.len();
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        version: VERSION,
        spec: model.spec.clone(),
        layers: model.layers.iter().map(layout).collect(),
        blob: blob.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
        byte_order: "little-endian f64, row-major".to_string(),
        tensors: entries,
    };
    fs::write(&blob, bytes)?;
    fs::write(header_path, serde_json::to_string_pretty(&header)?)?;
    Ok(header)
}

pub fn load_checkpoint(header_path: &Path) -> Result<Model> {
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(header_path)?)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(invalid(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(&header.blob))?;
    if bytes.len() % 8 != 0 {
        return Err(invalid("blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut table = header.tensors.iter();
    let mut next = |name: String| -> Result<Matrix> {
        let e = table.next().ok_or_else(|| invalid(format!("missing tensor {name}")))?;
        if e.name != name {
            return Err(invalid(format!("expected tensor {name}, found {}", e.name)));
        }
        let end = e.offset + e.rows * e.cols;
        if end > values.len() {
            return Err(invalid(format!("tensor {name} runs past the blob")));
        }
        Matrix::new(e.rows, e.cols, values[e.offset..end].to_vec())
    };

    let spec = header.spec.clone();
    spec.validate()?;
    let scheme = spec.scheme()?;
    let embedding = next("embedding".into())?;
    if header.layers.len() != spec.layers {
        return Err(invalid("layer layouts do not match spec"));
    }
    let mut layers = Vec::with_capacity(spec.layers);
    for (l, lay) in header.layers.iter().enumerate() {
        let key = match &lay.key {
            KeyLayout::Dense => KeyProjection::Dense {
                w_q: next(format!("layers.{l}.w_q"))?,
                w_k: next(format!("layers.{l}.w_k"))?,
            },
            KeyLayout::Factored { .. } => {
                let w_q = next(format!("layers.{l}.w_q"))?;
                let a_k = next(format!("layers.{l}.a_k"))?;
                let b_k = (0..spec.kv_heads)
                    .map(|g| next(format!("layers.{l}.b_k.{g}")))
                    .collect::<Result<_>>()?;
                KeyProjection::Factored { w_q, a_k, b_k }
            }
            KeyLayout::Pruned { retained } => KeyProjection::Pruned {
                w_q: next(format!("layers.{l}.w_q"))?,
                a_k: next(format!("layers.{l}.a_k"))?,
                retained: retained
                    .iter()
                    .map(|p| RetainedIndex::new(p.clone(), &scheme))
                    .collect::<Result<_>>()?,
            },
        };
        let value = match &lay.value {
            ValueLayout::Dense => ValueProjection::Dense {
                w_v: next(format!("layers.{l}.w_v"))?,
                w_o: next(format!("layers.{l}.w_o"))?,
            },
            ValueLayout::Factored { .. } => {
                let a_v = next(format!("layers.{l}.a_v"))?;
                let b_v = (0..spec.kv_heads)
                    .map(|g| next(format!("layers.{l}.b_v.{g}")))
                    .collect::<Result<_>>()?;
                ValueProjection::Factored { a_v, b_v, w_o: next(format!("layers.{l}.w_o"))? }
            }
            ValueLayout::Absorbed { rank } => ValueProjection::Absorbed {
                a_v: next(format!("layers.{l}.a_v"))?,
                w_o: next(format!("layers.{l}.w_o"))?,
                rank: *rank,
            },
        };
        layers.push(AttentionLayer { key, value });
    }
    let model = Model { spec, embedding, layers };
    model.validate()?;
    Ok(model)
}
