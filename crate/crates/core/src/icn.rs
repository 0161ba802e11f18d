//! Conversion of the fake-quantized graph into integer-only layers.
//!
//! A conv → batch-norm → floor-quantizer block becomes
//!
//! ```text
//! Y = clamp(Z_y + floor(M0 * 2^N0 * (Phi + B_q)), 0, 2^Q - 1)
//! B_q = round((B - mu + beta * sigma / gamma) / (S_i * S_w))
//! M   = (S_i * S_w / S_o) * (gamma / sigma)
//! ```
//!
//! with `Phi = sum (X - Z_x)(W - Z_w)`. In the folded mode the batch-norm
//! is merged into the float weights first and a single multiplier remains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::{decompose, FixedPointMultiplier, MANTISSA_BITS};
use crate::graph::{BatchNorm, LayerKind, LayerSpec, NetworkGraph, TensorShape};
use crate::mode::QuantMode;
use crate::packing::PackedCodes;
use crate::plan::BitPlan;
use crate::quant::{self, derive_weight_spec, QuantScheme, QuantSpec};

/// Per-channel integer requantization parameters of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcnParams {
    pub bq: Vec<i32>,
    pub mult: Vec<FixedPointMultiplier>,
    pub z_y: i32,
    pub q_out: u8,
}

/// Float weights and bias with batch-norm merged in.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedLayer {
    pub folded_weights: Vec<f32>,
    pub folded_bias: Vec<f32>,
}

/// Unrounded bias and multiplier per channel, for the exact-rational
/// diagnostic path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExactRequant {
    pub bias: Vec<f64>,
    pub mult: Vec<f64>,
}

/// What a layer does with its accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerOutput {
    /// Per-channel ICN activation.
    Icn(IcnParams),
    /// Folded batch-norm: per-channel bias, one multiplier.
    Folded {
        bq: Vec<i32>,
        mult: FixedPointMultiplier,
        z_y: i32,
        q_out: u8,
    },
    /// Classifier: raw `Phi + B_q` with the real scale of each channel.
    Logits { bq: Vec<i32>, scale: Vec<f64> },
    /// Global average pool on the input grid.
    AvgPool { bits: u8 },
}

/// One layer of an [`IntegerGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerLayer {
    pub index: usize,
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub input_shape: TensorShape,
    pub output_shape: TensorShape,
    pub in_bits: u8,
    /// Z_x of the incoming activation.
    pub in_zero_point: i32,
    pub w_bits: u8,
    /// Packed weight codes, c_O-major. Empty for pooling.
    pub weights: PackedCodes,
    /// Z_w, one entry (per-layer) or c_O entries (per-channel).
    pub w_zero_points: Vec<i32>,
    pub output: LayerOutput,
    /// Not serialized; present only on freshly converted graphs.
    pub exact: Option<ExactRequant>,
}

impl IntegerLayer {
    pub fn out_bits(&self) -> Option<u8> {
        match &self.output {
            LayerOutput::Icn(p) => Some(p.q_out),
            LayerOutput::Folded { q_out, .. } => Some(*q_out),
            LayerOutput::AvgPool { bits } => Some(*bits),
            LayerOutput::Logits { .. } => None,
        }
    }

    pub fn filter_len(&self) -> usize {
        let depth = match self.kind {
            LayerKind::DepthwiseConv2d => 1,
            _ => self.input_shape.c,
        };
        self.kernel.0 * self.kernel.1 * depth
    }

    /// Largest `|M0 * 2^N0|` used to requantize this layer (0 when none).
    pub fn max_multiplier(&self) -> f64 {
        match &self.output {
            LayerOutput::Icn(p) => p.mult.iter().map(|m| m.to_f64().abs()).fold(0.0, f64::max),
            LayerOutput::Folded { mult, .. } => mult.to_f64().abs(),
            _ => 0.0,
        }
    }

    pub fn w_zero_point(&self, channel: usize) -> i32 {
        if self.w_zero_points.len() == 1 {
            self.w_zero_points[0]
        } else {
            self.w_zero_points[channel]
        }
    }
}

/// Integer-only deployment graph.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerGraph {
    pub mode: QuantMode,
    pub input_shape: TensorShape,
    /// Round-to-nearest spec of the network input (8 bits).
    pub input_spec: QuantSpec,
    pub layers: Vec<IntegerLayer>,
}

impl IntegerGraph {
    pub fn output_shape(&self) -> TensorShape {
        self.layers.last().map_or(self.input_shape, |l| l.output_shape)
    }

    /// Largest requantization multiplier over all layers.
    pub fn max_multiplier(&self) -> f64 {
        self.layers.iter().map(IntegerLayer::max_multiplier).fold(0.0, f64::max)
    }

    /// Checks the chaining invariants (`Q_y` of layer i equals `Q_x` of i + 1).
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape;
        let mut bits = Some(self.input_spec.bits);
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.input_shape != shape {
                return Err(Error::Shape {
                    layer: i,
                    msg: format!("expects {} input, previous layer yields {shape}", layer.input_shape),
                });
            }
            if Some(layer.in_bits) != bits {
                return Err(Error::Graph(format!(
                    "layer {i} expects {}-bit input, previous layer yields {bits:?}",
                    layer.in_bits
                )));
            }
            if layer.kind.has_weights() {
                let expected = layer.output_shape.c * layer.filter_len();
                if layer.weights.len != expected || layer.weights.bits != layer.w_bits {
                    return Err(Error::Shape {
                        layer: i,
                        msg: format!("{} weight codes, expected {expected}", layer.weights.len),
                    });
                }
            }
            let channels = layer.output_shape.c;
            let ok = match &layer.output {
                LayerOutput::Icn(p) => p.bq.len() == channels && p.mult.len() == channels,
                LayerOutput::Folded { bq, .. } => bq.len() == channels,
                LayerOutput::Logits { bq, scale } => {
                    bq.len() == channels && scale.len() == channels && i + 1 == self.layers.len()
                }
                LayerOutput::AvgPool { bits } => *bits == layer.in_bits,
            };
            if !ok {
                return Err(Error::Graph(format!("layer {i} has inconsistent output parameters")));
            }
            shape = layer.output_shape;
            bits = layer.out_bits();
        }
        Ok(())
    }
}

/// Merges batch-norm into weights and bias: `w * gamma / sigma` and
/// `(B - mu) * gamma / sigma + beta`.
pub fn fold_batchnorm(layer: &LayerSpec) -> Result<FoldedLayer> {
    let bn = layer.bn.as_ref().ok_or_else(|| Error::Invariant {
        layer: layer.index,
        msg: "fold_batchnorm needs batch-norm parameters".into(),
    })?;
    if let Some(c) = bn.sigma.iter().position(|&s| s <= 0.0) {
        return Err(Error::Invariant {
            layer: layer.index,
            msg: format!("bn.sigma[{c}] must be > 0"),
        });
    }
    let per_channel = layer.filter_len();
    let bias = layer.bias_or_zero();
    let ratio = |c: usize| bn.gamma[c] as f64 / bn.sigma[c] as f64;
    let folded_weights = layer
        .weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (w as f64 * ratio(i / per_channel)) as f32)
        .collect();
    let folded_bias = (0..layer.out_channels)
        .map(|c| ((bias[c] as f64 - bn.mu[c] as f64) * ratio(c) + bn.beta[c] as f64) as f32)
        .collect();
    Ok(FoldedLayer {
        folded_weights,
        folded_bias,
    })
}

fn bn_or_identity(layer: &LayerSpec) -> BatchNorm {
    layer
        .bn
        .clone()
        .unwrap_or_else(|| BatchNorm::identity(layer.out_channels))
}

/// Rounds an exact bias to a signed 32-bit `B_q`.
fn round_bias(layer: usize, exact: f64) -> Result<i32> {
    let r = exact.round();
    if !r.is_finite() || r < i32::MIN as f64 || r > i32::MAX as f64 {
        return Err(Error::Overflow {
            layer,
            msg: format!("B_q = {r} does not fit in 32 bits"),
        });
    }
    Ok(r as i32)
}

fn multiplier(layer: usize, m: f64) -> Result<FixedPointMultiplier> {
    if m == 0.0 {
        return Ok(FixedPointMultiplier::DEAD);
    }
    let f = decompose(m)?;
    if f.n0 > MANTISSA_BITS as i32 {
        return Err(Error::Overflow {
            layer,
            msg: format!("requantization multiplier {m} needs a left shift"),
        });
    }
    Ok(f)
}

/// Unrounded ICN bias and multiplier for every channel.
pub fn icn_exact(layer: &LayerSpec, in_spec: &QuantSpec, w_spec: &QuantSpec, s_out: f64) -> ExactRequant {
    let bn = bn_or_identity(layer);
    let bias = layer.bias_or_zero();
    let s_i = in_spec.scale[0];
    let mut exact = ExactRequant::default();
    for c in 0..layer.out_channels {
        let (gamma, sigma) = (bn.gamma[c] as f64, bn.sigma[c] as f64);
        let s_acc = s_i * w_spec.scale_for(c);
        let shift = bias[c] as f64 - bn.mu[c] as f64 + bn.beta[c] as f64 * sigma / gamma;
        exact.bias.push(shift / s_acc);
        exact.mult.push(s_acc / s_out * (gamma / sigma));
    }
    exact
}

/// ICN parameters for a layer given its input, weight and output specs.
pub fn build_icn(
    layer: &LayerSpec,
    in_spec: &QuantSpec,
    w_spec: &QuantSpec,
    out_spec: &QuantSpec,
) -> Result<IcnParams> {
    if out_spec.groups() != 1 || in_spec.groups() != 1 {
        return Err(Error::Graph("activation specs must be per-layer".into()));
    }
    if let Some(bn) = &layer.bn {
        if let Some(c) = bn.gamma.iter().position(|&g| g == 0.0) {
            return Err(Error::Invariant {
                layer: layer.index,
                msg: format!("bn.gamma[{c}] is zero"),
            });
        }
    }
    let exact = icn_exact(layer, in_spec, w_spec, out_spec.scale[0]);
    let bq = exact
        .bias
        .iter()
        .map(|&b| round_bias(layer.index, b))
        .collect::<Result<Vec<_>>>()?;
    let mult = exact
        .mult
        .iter()
        .map(|&m| multiplier(layer.index, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(IcnParams {
        bq,
        mult,
        z_y: out_spec.zero_point[0],
        q_out: out_spec.bits,
    })
}

/// Quantization specs of the L + 1 activation boundaries under `plan`.
///
/// The input uses a round-to-nearest affine spec over `input_range`; every
/// other boundary uses the producing layer's `[0, b]` range, except after
/// average pooling, which keeps its input grid.
pub fn boundary_specs(graph: &NetworkGraph, plan: &BitPlan) -> Result<Vec<QuantSpec>> {
    plan.validate(graph)?;
    let (a, b) = graph.input_range;
    let mut specs = vec![QuantSpec::from_range(a as f64, b as f64, plan.q_act[0], false)?];
    for layer in &graph.layers {
        let q = plan.q_act[layer.index + 1];
        let spec = if layer.kind == LayerKind::AvgPool {
            specs[layer.index].clone()
        } else {
            QuantSpec::activation(layer.act_range.1 as f64, q)?
        };
        specs.push(spec);
    }
    Ok(specs)
}

/// The float weights and bias that get quantized under `mode`, plus the
/// weight spec. Folding happens here for the PL+FB mode.
pub(crate) struct PreparedWeights {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub spec: QuantSpec,
    pub folded: bool,
}

pub(crate) fn prepare_weights(layer: &LayerSpec, mode: QuantMode, bits: u8) -> Result<PreparedWeights> {
    let (weights, bias, folded) = match (mode, &layer.bn) {
        (QuantMode::PlFb, Some(_)) => {
            let f = fold_batchnorm(layer)?;
            (f.folded_weights, f.folded_bias, true)
        }
        (QuantMode::PlFb, None) => (layer.weights.clone(), layer.bias_or_zero(), true),
        (QuantMode::PcThresholds, _) => {
            return Err(Error::Graph(
                "the thresholds mode is modeled for memory only and cannot be converted".into(),
            ))
        }
        _ => (layer.weights.clone(), layer.bias_or_zero(), false),
    };
    let scheme: QuantScheme = mode.weight_scheme();
    let spec = derive_weight_spec(&weights, layer.out_channels, bits, scheme)?;
    Ok(PreparedWeights {
        weights,
        bias,
        spec,
        folded,
    })
}

/// Folded-mode bias and multiplier: `B' / (S_i S_w)` and `S_i S_w / S_o`.
fn folded_exact(bias: &[f32], in_spec: &QuantSpec, w_spec: &QuantSpec, s_out: f64) -> ExactRequant {
    let s_acc = in_spec.scale[0] * w_spec.scale[0];
    ExactRequant {
        bias: bias.iter().map(|&b| b as f64 / s_acc).collect(),
        mult: vec![s_acc / s_out; bias.len()],
    }
}

/// Largest `|Phi|` a layer can produce: `K * max|X - Z_x| * max|W - Z_w|`.
fn accumulator_bound(filter_len: usize, in_spec: &QuantSpec, w_spec: &QuantSpec) -> u64 {
    let span = |q: &QuantSpec, z: i32| -> u64 {
        let z = z as i64;
        z.max(q.max_code() as i64 - z) as u64
    };
    let x = span(in_spec, in_spec.zero_point[0]);
    let w = w_spec
        .zero_point
        .iter()
        .map(|&z| span(w_spec, z))
        .max()
        .unwrap_or(0);
    filter_len as u64 * x * w
}

fn convert_layer(
    layer: &LayerSpec,
    shapes: (TensorShape, TensorShape),
    in_spec: &QuantSpec,
    out_spec: &QuantSpec,
    w_bits: u8,
    mode: QuantMode,
    is_logits: bool,
) -> Result<IntegerLayer> {
    let (input_shape, output_shape) = shapes;
    let mut out = IntegerLayer {
        index: layer.index,
        kind: layer.kind,
        kernel: layer.kernel,
        stride: layer.stride,
        padding: layer.padding,
        input_shape,
        output_shape,
        in_bits: in_spec.bits,
        in_zero_point: in_spec.zero_point[0],
        w_bits,
        weights: PackedCodes::pack(&[], 8),
        w_zero_points: Vec::new(),
        output: LayerOutput::AvgPool { bits: in_spec.bits },
        exact: None,
    };
    if layer.kind == LayerKind::AvgPool {
        return Ok(out);
    }
    let prepared = prepare_weights(layer, mode, w_bits)?;
    let codes = quant::quantize_weights(&prepared.weights, &prepared.spec);
    let bound = accumulator_bound(layer.filter_len(), in_spec, &prepared.spec);
    if bound >= 1 << 31 {
        return Err(Error::Overflow {
            layer: layer.index,
            msg: format!("accumulator bound {bound} exceeds 32 bits"),
        });
    }
    let s_out = out_spec.scale[0];
    let exact = if prepared.folded {
        folded_exact(&prepared.bias, in_spec, &prepared.spec, s_out)
    } else {
        icn_exact(layer, in_spec, &prepared.spec, s_out)
    };
    let bq = exact
        .bias
        .iter()
        .map(|&b| round_bias(layer.index, b))
        .collect::<Result<Vec<_>>>()?;
    if let Some(b) = bq.iter().find(|b| b.unsigned_abs() as u64 + bound > i32::MAX as u64) {
        return Err(Error::Overflow {
            layer: layer.index,
            msg: format!("Phi + B_q may exceed 32 bits (B_q = {b}, |Phi| <= {bound})"),
        });
    }
    out.output = if is_logits {
        let scale = exact.mult.iter().map(|m| m * s_out).collect();
        LayerOutput::Logits { bq, scale }
    } else if prepared.folded {
        LayerOutput::Folded {
            bq,
            mult: multiplier(layer.index, exact.mult[0])?,
            z_y: out_spec.zero_point[0],
            q_out: out_spec.bits,
        }
    } else {
        let mult = exact
            .mult
            .iter()
            .map(|&m| multiplier(layer.index, m))
            .collect::<Result<Vec<_>>>()?;
        LayerOutput::Icn(IcnParams {
            bq,
            mult,
            z_y: out_spec.zero_point[0],
            q_out: out_spec.bits,
        })
    };
    out.weights = PackedCodes::pack(&codes, w_bits);
    out.w_zero_points = prepared.spec.zero_point.clone();
    out.exact = Some(exact);
    Ok(out)
}

/// Converts a float graph into an integer-only graph under `plan` and `mode`.
pub fn convert_graph(graph: &NetworkGraph, plan: &BitPlan, mode: QuantMode) -> Result<IntegerGraph> {
    graph.validate()?;
    let specs = boundary_specs(graph, plan)?;
    let shapes = graph.infer_shapes()?;
    let last = graph.layers.len() - 1;
    let layers = graph
        .layers
        .iter()
        .map(|layer| {
            let i = layer.index;
            convert_layer(
                layer,
                (shapes[i].input, shapes[i].output),
                &specs[i],
                &specs[i + 1],
                plan.q_w[i],
                mode,
                i == last && layer.kind == LayerKind::FullyConnected,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let ig = IntegerGraph {
        mode,
        input_shape: graph.input_shape,
        input_spec: specs[0].clone(),
        layers,
    };
    ig.validate()?;
    Ok(ig)
}
