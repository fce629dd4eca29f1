//! Model files: a JSON manifest describing the layers plus a sibling blob of
//! little-endian `f32` weights.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "input_shape": [1, 3, 3],
//!   "class_names": ["a", "b"],
//!   "weights_file": "tiny.bin",
//!   "weights_bytes": 120,
//!   "layers": [
//!     { "kind": "flatten" },
//!     { "kind": "dense", "params": [
//!         { "name": "weight", "shape": [2, 9], "offset": 0, "bytes": 72 },
//!         { "name": "bias", "shape": [2], "offset": 72, "bytes": 8 } ] }
//!   ]
//! }
//! ```
//!
//! Offsets are in bytes from the start of the blob. Together the parameter
//! ranges must tile the blob exactly.

use std::fs;
use std::path::{Path, PathBuf};

use attrib_core::{Layer, LayerKind, ModelGraph, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub input_shape: [usize; 3],
    pub class_names: Vec<String>,
    pub weights_file: String,
    pub weights_bytes: usize,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

impl ModelManifest {
    /// Stable text form: two-space indented JSON with a trailing newline.
    pub fn to_canonical_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest is always serialisable");
        s.push('\n');
        s
    }

    pub fn parse(text: &[u8]) -> Result<Self> {
        let m: ModelManifest = serde_json::from_slice(text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: m.format_version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(m)
    }

    /// Checks that parameter ranges are well-formed, disjoint and cover
    /// `weights_bytes` without gaps.
    fn check_layout(&self) -> Result<()> {
        let mut ranges: Vec<(usize, usize, String)> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for p in &layer.params {
                let count: usize = p.shape.iter().product();
                if p.bytes != count * 4 {
                    return Err(Error::Format(format!(
                        "layer {l} param {}: {} bytes declared for shape {:?}",
                        p.name, p.bytes, p.shape
                    )));
                }
                ranges.push((p.offset, p.offset + p.bytes, format!("layer {l} {}", p.name)));
            }
        }
        ranges.sort();
        let mut end = 0;
        for (start, stop, what) in &ranges {
            if *start != end {
                let problem = if *start < end {
                    "overlaps the previous parameter"
                } else {
                    "leaves a gap"
                };
                return Err(Error::Format(format!("{what} at byte {start} {problem}")));
            }
            end = *stop;
        }
        if end != self.weights_bytes {
            return Err(Error::Format(format!(
                "parameters cover {end} bytes but weights_bytes is {}",
                self.weights_bytes
            )));
        }
        Ok(())
    }
}

fn param<'a>(entry: &'a LayerEntry, name: &str, l: usize) -> Result<&'a ParamEntry> {
    entry
        .params
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Format(format!("layer {l} ({}) is missing param {name:?}", entry.kind)))
}

fn read_tensor(blob: &[u8], p: &ParamEntry) -> Result<Tensor> {
    let data = blob[p.offset..p.offset + p.bytes]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Tensor::new(p.shape.clone(), data)?)
}

/// Builds a model from manifest text and its weight blob.
pub fn load_model(manifest_bytes: &[u8], weight_bytes: &[u8]) -> Result<ModelGraph> {
    let manifest = ModelManifest::parse(manifest_bytes)?;
    manifest.check_layout()?;
    if weight_bytes.len() < manifest.weights_bytes {
        return Err(Error::Truncated {
            expected: manifest.weights_bytes,
            found: weight_bytes.len(),
        });
    }
    if weight_bytes.len() > manifest.weights_bytes {
        return Err(Error::Format(format!(
            "weight blob has {} bytes, manifest declares {}",
            weight_bytes.len(),
            manifest.weights_bytes
        )));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (l, entry) in manifest.layers.iter().enumerate() {
        let kind = LayerKind::from_name(&entry.kind).ok_or_else(|| Error::Format(format!("layer {l}: unknown kind {:?}", entry.kind)))?;
        let expected_params: &[&str] = match kind {
            LayerKind::Dense | LayerKind::Conv2d => &["weight", "bias"],
            _ => &[],
        };
        if entry.params.len() != expected_params.len() {
            return Err(Error::Format(format!(
                "layer {l} ({}) has {} params, expected {}",
                entry.kind,
                entry.params.len(),
                expected_params.len()
            )));
        }
        let layer = match kind {
            LayerKind::Dense => Layer::Dense {
                weight: read_tensor(weight_bytes, param(entry, "weight", l)?)?,
                bias: read_tensor(weight_bytes, param(entry, "bias", l)?)?,
            },
            LayerKind::Conv2d => Layer::Conv2d {
                weight: read_tensor(weight_bytes, param(entry, "weight", l)?)?,
                bias: read_tensor(weight_bytes, param(entry, "bias", l)?)?,
                padding: entry.padding.unwrap_or(0),
            },
            LayerKind::Relu => Layer::Relu,
            LayerKind::MaxPool2d => Layer::MaxPool2d {
                size: entry
                    .size
                    .ok_or_else(|| Error::Format(format!("layer {l} (maxpool2d) needs a size")))?,
            },
            LayerKind::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerKind::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    Ok(ModelGraph::new(manifest.input_shape, layers, manifest.class_names)?)
}

/// Serialises `model`; the manifest refers to the blob as `weights_file`.
///
/// Every weight must be exactly representable as `f32`, so that loading the
/// result gives back the same model.
pub fn save_model(model: &ModelGraph, weights_file: &str) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(model.layers().len());
    for (l, layer) in model.layers().iter().enumerate() {
        let mut params = Vec::new();
        for (name, t) in ["weight", "bias"].iter().zip(layer.params()) {
            let offset = blob.len();
            for &v in t.data() {
                let narrow = v as f32;
                if narrow as f64 != v {
                    return Err(Error::Format(format!(
                        "layer {l} {name}: {v} is not exactly representable as float32"
                    )));
                }
                blob.extend_from_slice(&narrow.to_le_bytes());
            }
            params.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                bytes: blob.len() - offset,
            });
        }
        let (padding, size) = match layer {
            Layer::Conv2d { padding, .. } => (Some(*padding), None),
            Layer::MaxPool2d { size } => (None, Some(*size)),
            _ => (None, None),
        };
        layers.push(LayerEntry {
            kind: layer.kind().name().to_string(),
            padding,
            size,
            params,
        });
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape(),
        class_names: model.class_names().to_vec(),
        weights_file: weights_file.to_string(),
        weights_bytes: blob.len(),
        layers,
    };
    Ok((manifest.to_canonical_string(), blob))
}

/// The blob path for a manifest path: same directory, `<stem>.bin`.
pub fn sibling_blob(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `<path>` and its sibling `<stem>.bin`.
pub fn write_model(path: &Path, model: &ModelGraph) -> Result<()> {
    let blob_path = sibling_blob(path);
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Format(format!("bad model path {}", path.display())))?;
    let (manifest, blob) = save_model(model, blob_name)?;
    fs::write(path, manifest).map_err(|e| Error::io(path, e))?;
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

/// Reads a manifest and the blob it names (relative to the manifest).
pub fn read_model(path: &Path) -> Result<ModelGraph> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest = ModelManifest::parse(&text)?;
    let blob_path = path.parent().unwrap_or(Path::new("")).join(&manifest.weights_file);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    load_model(&text, &blob)
}
