//! Fake-quantized float forward pass, the reference for the integer graph.
//!
//! Weights are projected onto their quantization grid, the convolution,
//! bias and batch-norm run in `f64`, and each output is quantized with the
//! floor activation quantizer. No integer requantization parameters are used.

use crate::error::Result;
use crate::graph::{BatchNorm, LayerKind, LayerSpec, NetworkGraph, TensorShape};
use crate::icn::{boundary_specs, prepare_weights};
use crate::mode::QuantMode;
use crate::plan::BitPlan;
use crate::quant::{self, max_code, quant_act, QuantSpec};

/// Value at one boundary of the fake-quantized graph.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleValue {
    Codes(Vec<u8>),
    /// Classifier outputs, not quantized.
    Real(Vec<f64>),
}

impl OracleValue {
    pub fn codes(&self) -> Option<&[u8]> {
        match self {
            OracleValue::Codes(c) => Some(c),
            OracleValue::Real(_) => None,
        }
    }
}

struct OracleLayer {
    kind: LayerKind,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    input: TensorShape,
    output: TensorShape,
    /// Fake-quantized weights, c_O-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    /// Batch-norm applied after the convolution (absent when folded).
    bn: Option<BatchNorm>,
    filter_len: usize,
    logits: bool,
}

/// The fake-quantized network g(x) for a given plan and mode.
pub struct FakeQuantGraph {
    specs: Vec<QuantSpec>,
    layers: Vec<OracleLayer>,
}

impl FakeQuantGraph {
    pub fn new(graph: &NetworkGraph, plan: &BitPlan, mode: QuantMode) -> Result<Self> {
        graph.validate()?;
        let specs = boundary_specs(graph, plan)?;
        let shapes = graph.infer_shapes()?;
        let last = graph.layers.len() - 1;
        let layers = graph
            .layers
            .iter()
            .map(|l| oracle_layer(l, plan.q_w[l.index], mode, shapes[l.index].input, shapes[l.index].output, l.index == last))
            .collect::<Result<Vec<_>>>()?;
        Ok(FakeQuantGraph { specs, layers })
    }

    /// Quantization spec of boundary `j` (0 is the network input).
    pub fn boundary_spec(&self, j: usize) -> &QuantSpec {
        &self.specs[j]
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Quantizes a float input to codes with the round-to-nearest input spec.
    pub fn quantize_input(&self, input: &[f32]) -> Vec<u8> {
        input.iter().map(|&v| self.specs[0].quantize(v as f64, 0)).collect()
    }

    /// Evaluates layer `i` on the codes of boundary `i`.
    pub fn forward_layer(&self, i: usize, codes: &[u8]) -> OracleValue {
        let in_spec = &self.specs[i];
        let x: Vec<f64> = codes.iter().map(|&c| in_spec.dequantize(c, 0)).collect();
        let layer = &self.layers[i];
        if layer.kind == LayerKind::AvgPool {
            return OracleValue::Codes(avg_pool_float(&x, layer.input, in_spec));
        }
        let z = conv_float(&x, layer);
        if layer.logits {
            return OracleValue::Real(z);
        }
        let out_spec = &self.specs[i + 1];
        OracleValue::Codes(z.iter().map(|&v| quant_act(v, out_spec)).collect())
    }

    /// Full fake-quantized forward pass from a float input; one entry per layer.
    pub fn run_trace(&self, input: &[f32]) -> Vec<OracleValue> {
        let mut codes = self.quantize_input(input);
        let mut trace = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let v = self.forward_layer(i, &codes);
            if let OracleValue::Codes(c) = &v {
                codes = c.clone();
            }
            trace.push(v);
        }
        trace
    }
}

fn oracle_layer(
    layer: &LayerSpec,
    w_bits: u8,
    mode: QuantMode,
    input: TensorShape,
    output: TensorShape,
    is_last: bool,
) -> Result<OracleLayer> {
    let mut out = OracleLayer {
        kind: layer.kind,
        kernel: layer.kernel,
        stride: layer.stride,
        padding: layer.padding,
        input,
        output,
        weights: Vec::new(),
        bias: Vec::new(),
        bn: None,
        filter_len: layer.filter_len(),
        logits: is_last && layer.kind == LayerKind::FullyConnected,
    };
    if layer.kind == LayerKind::AvgPool {
        return Ok(out);
    }
    let prepared = prepare_weights(layer, mode, w_bits)?;
    let as_f64: Vec<f64> = prepared.weights.iter().map(|&w| w as f64).collect();
    out.weights = quant::fake_quantize(&as_f64, &prepared.spec, quant::Mode::Weights);
    out.bias = prepared.bias.iter().map(|&b| b as f64).collect();
    out.bn = if prepared.folded { None } else { layer.bn.clone() };
    Ok(out)
}

/// Float convolution plus bias and batch-norm, channel-last, zero padding.
fn conv_float(x: &[f64], layer: &OracleLayer) -> Vec<f64> {
    let (inp, out) = (layer.input, layer.output);
    let (kh, kw) = layer.kernel;
    let depthwise = layer.kind == LayerKind::DepthwiseConv2d;
    let mut z = vec![0.0; out.elements()];
    for oh in 0..out.h {
        for ow in 0..out.w {
            for co in 0..out.c {
                let filter = &layer.weights[co * layer.filter_len..(co + 1) * layer.filter_len];
                let mut sum = 0.0;
                for i in 0..kh {
                    for j in 0..kw {
                        let ih = (oh * layer.stride.0 + i) as isize - layer.padding.0 as isize;
                        let iw = (ow * layer.stride.1 + j) as isize - layer.padding.1 as isize;
                        if ih < 0 || iw < 0 || ih >= inp.h as isize || iw >= inp.w as isize {
                            continue;
                        }
                        let base = (ih as usize * inp.w + iw as usize) * inp.c;
                        if depthwise {
                            sum += x[base + co] * filter[i * kw + j];
                        } else {
                            for ci in 0..inp.c {
                                sum += x[base + ci] * filter[(i * kw + j) * inp.c + ci];
                            }
                        }
                    }
                }
                let mut v = sum + layer.bias[co];
                if let Some(bn) = &layer.bn {
                    v = (v - bn.mu[co] as f64) / bn.sigma[co] as f64 * bn.gamma[co] as f64
                        + bn.beta[co] as f64;
                }
                z[(oh * out.w + ow) * out.c + co] = v;
            }
        }
    }
    z
}

/// Mean of the dequantized plane per channel, re-quantized with floor on the
/// input grid.
fn avg_pool_float(x: &[f64], shape: TensorShape, spec: &QuantSpec) -> Vec<u8> {
    let n = (shape.h * shape.w) as f64;
    let (s, z) = (spec.scale[0], spec.zero_point[0] as f64);
    (0..shape.c)
        .map(|c| {
            let mean = x.iter().skip(c).step_by(shape.c).sum::<f64>() / n;
            let level = mean / s + z;
            // an exact grid level may come out a few ulps low after summation
            let snapped = if (level - level.round()).abs() < 1e-9 {
                level.round()
            } else {
                level.floor()
            };
            snapped.clamp(0.0, max_code(spec.bits) as f64) as u8
        })
        .collect()
}

/// Unquantized float forward pass: raw weights, batch-norm, ReLU clipped to
/// each layer's activation range. Classifier outputs stay linear. One entry
/// per layer.
pub fn run_float(graph: &NetworkGraph, input: &[f32]) -> Result<Vec<Vec<f64>>> {
    graph.validate()?;
    let shapes = graph.infer_shapes()?;
    let last = graph.layers.len() - 1;
    let mut x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    let mut trace = Vec::with_capacity(graph.layers.len());
    for (i, l) in graph.layers.iter().enumerate() {
        let y = if l.kind == LayerKind::AvgPool {
            let c = shapes[i].input.c;
            let n = (shapes[i].input.h * shapes[i].input.w) as f64;
            (0..c)
                .map(|k| x.iter().skip(k).step_by(c).sum::<f64>() / n)
                .collect()
        } else {
            let layer = OracleLayer {
                kind: l.kind,
                kernel: l.kernel,
                stride: l.stride,
                padding: l.padding,
                input: shapes[i].input,
                output: shapes[i].output,
                weights: l.weights.iter().map(|&w| w as f64).collect(),
                bias: l.bias_or_zero().iter().map(|&b| b as f64).collect(),
                bn: l.bn.clone(),
                filter_len: l.filter_len(),
                logits: false,
            };
            let z = conv_float(&x, &layer);
            if i == last && l.kind == LayerKind::FullyConnected {
                z
            } else {
                let b = l.act_range.1 as f64;
                z.into_iter().map(|v| v.clamp(0.0, b)).collect()
            }
        };
        trace.push(y.clone());
        x = y;
    }
    Ok(trace)
}

/// Fake-quantized forward pass on a float input (one entry per layer).
pub fn run_fakequant(
    graph: &NetworkGraph,
    plan: &BitPlan,
    mode: QuantMode,
    input: &[f32],
) -> Result<Vec<OracleValue>> {
    Ok(FakeQuantGraph::new(graph, plan, mode)?.run_trace(input))
}
