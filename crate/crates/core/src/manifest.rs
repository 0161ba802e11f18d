//! JSON model manifest with optional sidecar blobs of little-endian f32.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "input_shape": { "n": 1, "h": 224, "w": 224, "c": 3 },
//!   "input_range": [-1.0, 1.0],
//!   "layers": [
//!     { "kind": "conv2d", "kernel": [3, 3], "stride": [2, 2], "padding": [1, 1],
//!       "in_channels": 3, "out_channels": 32,
//!       "weights": { "blob": "weights.bin", "offset": 0, "count": 864 },
//!       "bn": { "gamma": [...], "beta": [...], "mu": [...], "sigma": [...] },
//!       "act_range": [0.0, 6.0] }
//!   ]
//! }
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchNorm, LayerKind, LayerSpec, NetworkGraph, TensorShape};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Reference into a sidecar file of little-endian f32 values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub blob: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of elements.
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FloatParam {
    Inline(Vec<f32>),
    Blob(BlobRef),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BnDoc {
    gamma: FloatParam,
    beta: FloatParam,
    mu: FloatParam,
    sigma: FloatParam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    index: Option<usize>,
    kind: LayerKind,
    #[serde(default = "one_by_one")]
    kernel: (usize, usize),
    #[serde(default = "one_by_one")]
    stride: (usize, usize),
    #[serde(default)]
    padding: (usize, usize),
    in_channels: usize,
    out_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<FloatParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<FloatParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<BnDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act_range: Option<(f32, f32)>,
}

fn one_by_one() -> (usize, usize) {
    (1, 1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestDoc {
    #[serde(default = "default_schema")]
    schema_version: u32,
    input_shape: TensorShape,
    input_range: (f32, f32),
    layers: Vec<LayerDoc>,
}

fn default_schema() -> u32 {
    MANIFEST_SCHEMA_VERSION
}

struct BlobCache {
    base: PathBuf,
    files: HashMap<String, Vec<u8>>,
}

impl BlobCache {
    fn resolve(&mut self, param: &FloatParam, layer: usize, what: &str) -> Result<Vec<f32>> {
        let r = match param {
            FloatParam::Inline(v) => return Ok(v.clone()),
            FloatParam::Blob(r) => r,
        };
        if !self.files.contains_key(&r.blob) {
            let path = self.base.join(&r.blob);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            self.files.insert(r.blob.clone(), bytes);
        }
        let bytes = &self.files[&r.blob];
        let start = r.offset as usize;
        let end = start
            .checked_add(r.count as usize * 4)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Shape {
                layer,
                msg: format!(
                    "{what}: blob '{}' has {} bytes, reference needs {} elements at offset {}",
                    r.blob,
                    bytes.len(),
                    r.count,
                    r.offset
                ),
            })?;
        Ok(bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Loads and validates a manifest. Blob paths are relative to the manifest.
pub fn load_graph(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_graph(&text, base)
}

/// Parses manifest text; `base` is the directory blob references resolve against.
pub fn parse_graph(text: &str, base: impl Into<PathBuf>) -> Result<NetworkGraph> {
    let doc: ManifestDoc = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if doc.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "unsupported schema_version {}",
            doc.schema_version
        )));
    }
    let mut blobs = BlobCache {
        base: base.into(),
        files: HashMap::new(),
    };
    let mut layers = Vec::with_capacity(doc.layers.len());
    let mut prev_range = doc.input_range;
    for (i, l) in doc.layers.into_iter().enumerate() {
        if let Some(idx) = l.index {
            if idx != i {
                return Err(Error::Invariant {
                    layer: i,
                    msg: format!("index field is {idx}, expected {i}"),
                });
            }
        }
        let weights = match &l.weights {
            Some(p) => blobs.resolve(p, i, "weights")?,
            None => Vec::new(),
        };
        let bias = l
            .bias
            .as_ref()
            .map(|p| blobs.resolve(p, i, "bias"))
            .transpose()?;
        let bn = match &l.bn {
            Some(bn) => Some(BatchNorm {
                gamma: blobs.resolve(&bn.gamma, i, "bn.gamma")?,
                beta: blobs.resolve(&bn.beta, i, "bn.beta")?,
                mu: blobs.resolve(&bn.mu, i, "bn.mu")?,
                sigma: blobs.resolve(&bn.sigma, i, "bn.sigma")?,
            }),
            None => None,
        };
        let act_range = match (l.kind, l.act_range) {
            (LayerKind::AvgPool, _) => prev_range,
            (_, Some(r)) => r,
            (_, None) => {
                return Err(Error::Invariant {
                    layer: i,
                    msg: "missing act_range".into(),
                })
            }
        };
        prev_range = act_range;
        layers.push(LayerSpec {
            index: i,
            kind: l.kind,
            kernel: l.kernel,
            stride: l.stride,
            padding: l.padding,
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            weights,
            bias,
            bn,
            act_range,
        });
    }
    let graph = NetworkGraph {
        layers,
        input_shape: doc.input_shape,
        input_range: doc.input_range,
    };
    graph.validate()?;
    Ok(graph)
}

/// Where `save_graph` puts float parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamStorage {
    Inline,
    /// All parameters go into one sidecar file next to the manifest.
    Sidecar,
}

struct BlobWriter {
    name: String,
    bytes: Vec<u8>,
    storage: ParamStorage,
}

impl BlobWriter {
    fn put(&mut self, values: &[f32]) -> FloatParam {
        match self.storage {
            ParamStorage::Inline => FloatParam::Inline(values.to_vec()),
            ParamStorage::Sidecar => {
                let offset = self.bytes.len() as u64;
                for v in values {
                    self.bytes.extend_from_slice(&v.to_le_bytes());
                }
                FloatParam::Blob(BlobRef {
                    blob: self.name.clone(),
                    offset,
                    count: values.len() as u64,
                })
            }
        }
    }
}

fn to_doc(graph: &NetworkGraph, writer: &mut BlobWriter) -> ManifestDoc {
    let layers = graph
        .layers
        .iter()
        .map(|l| LayerDoc {
            index: Some(l.index),
            kind: l.kind,
            kernel: l.kernel,
            stride: l.stride,
            padding: l.padding,
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            weights: l.kind.has_weights().then(|| writer.put(&l.weights)),
            bias: l.bias.as_ref().map(|b| writer.put(b)),
            bn: l.bn.as_ref().map(|bn| BnDoc {
                gamma: writer.put(&bn.gamma),
                beta: writer.put(&bn.beta),
                mu: writer.put(&bn.mu),
                sigma: writer.put(&bn.sigma),
            }),
            act_range: (l.kind != LayerKind::AvgPool).then_some(l.act_range),
        })
        .collect();
    ManifestDoc {
        schema_version: MANIFEST_SCHEMA_VERSION,
        input_shape: graph.input_shape,
        input_range: graph.input_range,
        layers,
    }
}

/// Serializes a graph with every parameter inline.
pub fn to_manifest_string(graph: &NetworkGraph) -> String {
    let mut writer = BlobWriter {
        name: String::new(),
        bytes: Vec::new(),
        storage: ParamStorage::Inline,
    };
    serde_json::to_string_pretty(&to_doc(graph, &mut writer)).expect("manifest serializes")
}

/// Writes `path` and, for [`ParamStorage::Sidecar`], `<stem>.bin` beside it.
pub fn save_graph(graph: &NetworkGraph, path: impl AsRef<Path>, storage: ParamStorage) -> Result<()> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mut writer = BlobWriter {
        name: format!("{stem}.bin"),
        bytes: Vec::new(),
        storage,
    };
    let doc = to_doc(graph, &mut writer);
    let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    if storage == ParamStorage::Sidecar {
        let blob_path = path.with_file_name(&writer.name);
        fs::write(&blob_path, &writer.bytes).map_err(|e| Error::io(&blob_path, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
