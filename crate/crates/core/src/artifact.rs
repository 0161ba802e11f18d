//! On-disk form of an [`IntegerGraph`]: `integer_graph.json` holding shapes,
//! zero-points and section references, and `integer_graph.bin` holding the
//! binary sections back to back: packed weight codes, `B_q` as i32, `M0` as
//! i32 and `N0` as i8, all little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::{FixedPointMultiplier, MANTISSA_BITS};
use crate::graph::{LayerKind, TensorShape};
use crate::icn::{IcnParams, IntegerGraph, IntegerLayer, LayerOutput};
use crate::mode::QuantMode;
use crate::packing::PackedCodes;
use crate::quant::QuantSpec;

pub const GRAPH_FILE: &str = "integer_graph.json";
pub const BLOB_FILE: &str = "integer_graph.bin";

/// A byte range of the blob holding `count` elements.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Section {
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsDoc {
    #[serde(flatten)]
    section: Section,
    bits: u8,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum OutputDoc {
    Icn {
        bq: Section,
        m0: Section,
        n0: Section,
        z_y: i32,
        q_out: u8,
    },
    Folded {
        bq: Section,
        m0: Section,
        n0: Section,
        z_y: i32,
        q_out: u8,
    },
    Logits {
        bq: Section,
        scale: Vec<f64>,
    },
    AvgPool {
        bits: u8,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    index: usize,
    kind: LayerKind,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    input_shape: TensorShape,
    output_shape: TensorShape,
    in_bits: u8,
    in_zero_point: i32,
    w_bits: u8,
    w_zero_points: Vec<i32>,
    weights: Option<WeightsDoc>,
    output: OutputDoc,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphDoc {
    schema_version: u32,
    mode: QuantMode,
    input_shape: TensorShape,
    input_spec: QuantSpec,
    layers: Vec<LayerDoc>,
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn raw(&mut self, data: &[u8], count: usize) -> Section {
        let s = Section {
            offset: self.bytes.len(),
            count,
        };
        self.bytes.extend_from_slice(data);
        s
    }

    fn i32s(&mut self, v: impl ExactSizeIterator<Item = i32>) -> Section {
        let count = v.len();
        let data: Vec<u8> = v.flat_map(i32::to_le_bytes).collect();
        self.raw(&data, count)
    }

    fn i8s(&mut self, v: impl ExactSizeIterator<Item = i8>) -> Section {
        let count = v.len();
        let data: Vec<u8> = v.map(|x| x as u8).collect();
        self.raw(&data, count)
    }

    fn multipliers(&mut self, mult: &[FixedPointMultiplier]) -> (Section, Section) {
        let m0 = self.i32s(mult.iter().map(|m| m.m0_code));
        // n0 is bounded well inside i8 by the converter
        let n0 = self.i8s(mult.iter().map(|m| m.n0 as i8));
        (m0, n0)
    }
}

fn output_doc(output: &LayerOutput, w: &mut BlobWriter) -> OutputDoc {
    match output {
        LayerOutput::Icn(p) => {
            let bq = w.i32s(p.bq.iter().copied());
            let (m0, n0) = w.multipliers(&p.mult);
            OutputDoc::Icn {
                bq,
                m0,
                n0,
                z_y: p.z_y,
                q_out: p.q_out,
            }
        }
        LayerOutput::Folded { bq, mult, z_y, q_out } => {
            let bq = w.i32s(bq.iter().copied());
            let (m0, n0) = w.multipliers(std::slice::from_ref(mult));
            OutputDoc::Folded {
                bq,
                m0,
                n0,
                z_y: *z_y,
                q_out: *q_out,
            }
        }
        LayerOutput::Logits { bq, scale } => OutputDoc::Logits {
            bq: w.i32s(bq.iter().copied()),
            scale: scale.clone(),
        },
        LayerOutput::AvgPool { bits } => OutputDoc::AvgPool { bits: *bits },
    }
}

/// Writes `graph` into directory `dir` (created if missing).
pub fn save_integer_graph(graph: &IntegerGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = BlobWriter::default();
    let layers = graph
        .layers
        .iter()
        .map(|l| LayerDoc {
            index: l.index,
            kind: l.kind,
            kernel: l.kernel,
            stride: l.stride,
            padding: l.padding,
            input_shape: l.input_shape,
            output_shape: l.output_shape,
            in_bits: l.in_bits,
            in_zero_point: l.in_zero_point,
            w_bits: l.w_bits,
            w_zero_points: l.w_zero_points.clone(),
            weights: l.kind.has_weights().then(|| WeightsDoc {
                section: blob.raw(&l.weights.data, l.weights.len),
                bits: l.weights.bits,
            }),
            output: output_doc(&l.output, &mut blob),
        })
        .collect();
    let doc = GraphDoc {
        schema_version: crate::SCHEMA_VERSION,
        mode: graph.mode,
        input_shape: graph.input_shape,
        input_spec: graph.input_spec.clone(),
        layers,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    let json_path = dir.join(GRAPH_FILE);
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob.bytes).map_err(|e| Error::io(&blob_path, e))
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    layer: usize,
}

impl BlobReader<'_> {
    fn slice(&self, s: Section, width_bits: usize) -> Result<&[u8]> {
        let len = (s.count * width_bits).div_ceil(8);
        s.offset
            .checked_add(len)
            .and_then(|end| self.bytes.get(s.offset..end))
            .ok_or_else(|| Error::Parse(format!("layer {}: section runs past the end of {BLOB_FILE}", self.layer)))
    }

    fn i32s(&self, s: Section) -> Result<Vec<i32>> {
        Ok(self
            .slice(s, 32)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn multipliers(&self, m0: Section, n0: Section) -> Result<Vec<FixedPointMultiplier>> {
        let codes = self.i32s(m0)?;
        let exps = self.slice(n0, 8)?;
        if codes.len() != exps.len() {
            return Err(Error::Parse(format!("layer {}: M0 and N0 lengths differ", self.layer)));
        }
        Ok(codes
            .into_iter()
            .zip(exps)
            .map(|(m0_code, &n)| FixedPointMultiplier {
                m0_code,
                n0: n as i8 as i32,
            })
            .collect())
    }
}

fn output_from_doc(doc: OutputDoc, r: &BlobReader) -> Result<LayerOutput> {
    Ok(match doc {
        OutputDoc::Icn { bq, m0, n0, z_y, q_out } => LayerOutput::Icn(IcnParams {
            bq: r.i32s(bq)?,
            mult: r.multipliers(m0, n0)?,
            z_y,
            q_out,
        }),
        OutputDoc::Folded { bq, m0, n0, z_y, q_out } => {
            let mult = r.multipliers(m0, n0)?;
            let [mult] = mult[..] else {
                return Err(Error::Parse(format!("layer {}: folded layers carry one multiplier", r.layer)));
            };
            LayerOutput::Folded {
                bq: r.i32s(bq)?,
                mult,
                z_y,
                q_out,
            }
        }
        OutputDoc::Logits { bq, scale } => LayerOutput::Logits {
            bq: r.i32s(bq)?,
            scale,
        },
        OutputDoc::AvgPool { bits } => LayerOutput::AvgPool { bits },
    })
}

fn check_multipliers(layer: &IntegerLayer) -> Result<()> {
    let mults = match &layer.output {
        LayerOutput::Icn(p) => p.mult.clone(),
        LayerOutput::Folded { mult, .. } => vec![*mult],
        _ => Vec::new(),
    };
    let half = 1i64 << (MANTISSA_BITS - 1);
    for m in mults {
        let code = (m.m0_code as i64).abs();
        let normalized = code == 0 || (half..2 * half).contains(&code);
        if !normalized || m.n0 > MANTISSA_BITS as i32 {
            return Err(Error::Invariant {
                layer: layer.index,
                msg: format!("multiplier ({}, {}) is not normalized", m.m0_code, m.n0),
            });
        }
    }
    Ok(())
}

/// Reads a graph written by [`save_integer_graph`] and checks its invariants.
pub fn load_integer_graph(dir: impl AsRef<Path>) -> Result<IntegerGraph> {
    let dir = dir.as_ref();
    let json_path = dir.join(GRAPH_FILE);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let doc: GraphDoc = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    if doc.schema_version != crate::SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "unsupported schema_version {} (expected {})",
            doc.schema_version,
            crate::SCHEMA_VERSION
        )));
    }
    let blob_path = dir.join(BLOB_FILE);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let layers = doc
        .layers
        .into_iter()
        .map(|d| {
            let r = BlobReader {
                bytes: &bytes,
                layer: d.index,
            };
            let weights = match d.weights {
                None => PackedCodes::pack(&[], d.w_bits),
                Some(w) => {
                    if !matches!(w.bits, 2 | 4 | 8) {
                        return Err(Error::BitWidth(w.bits));
                    }
                    let data = r.slice(w.section, w.bits as usize)?.to_vec();
                    PackedCodes::from_bytes(data, w.section.count, w.bits)
                        .ok_or_else(|| Error::Parse(format!("layer {}: bad weight encoding", d.index)))?
                }
            };
            let layer = IntegerLayer {
                index: d.index,
                kind: d.kind,
                kernel: d.kernel,
                stride: d.stride,
                padding: d.padding,
                input_shape: d.input_shape,
                output_shape: d.output_shape,
                in_bits: d.in_bits,
                in_zero_point: d.in_zero_point,
                w_bits: d.w_bits,
                weights,
                w_zero_points: d.w_zero_points,
                output: output_from_doc(d.output, &r)?,
                exact: None,
            };
            check_multipliers(&layer)?;
            Ok(layer)
        })
        .collect::<Result<Vec<_>>>()?;
    let graph = IntegerGraph {
        mode: doc.mode,
        input_shape: doc.input_shape,
        input_spec: doc.input_spec,
        layers,
    };
    graph.validate()?;
    Ok(graph)
}

/// Location of the `B_q` section of layer `index` in a saved graph, for
/// tooling that patches parameters in place.
pub fn bias_section(dir: impl AsRef<Path>, index: usize) -> Result<Option<Section>> {
    let json_path = dir.as_ref().join(GRAPH_FILE);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let doc: GraphDoc = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(doc.layers.get(index).and_then(|l| match &l.output {
        OutputDoc::Icn { bq, .. } | OutputDoc::Folded { bq, .. } | OutputDoc::Logits { bq, .. } => Some(*bq),
        OutputDoc::AvgPool { .. } => None,
    }))
}
