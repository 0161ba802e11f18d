//! Integer-only reference interpreter.
//!
//! Codes are unpacked to 8-bit lanes at each layer boundary. Accumulation is
//! exact in 32 bits (bounds are checked at conversion time); requantization
//! multiplies in 64 bits and floor-shifts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fixed_point::FixedPointMultiplier;
use crate::graph::{LayerKind, TensorShape};
use crate::icn::{IcnParams, IntegerGraph, IntegerLayer, LayerOutput};
use crate::packing::PackedCodes;
use crate::quant::max_code;

/// Channel-last activation codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegerTensor {
    pub shape: TensorShape,
    pub bits: u8,
    pub codes: PackedCodes,
}

impl IntegerTensor {
    pub fn from_codes(shape: TensorShape, bits: u8, codes: &[u8]) -> Result<Self> {
        if codes.len() != shape.elements() {
            return Err(Error::Input(format!(
                "{} codes for a {shape} tensor",
                codes.len()
            )));
        }
        if let Some(c) = codes.iter().find(|&&c| c as u32 > max_code(bits)) {
            return Err(Error::Input(format!("code {c} exceeds {bits} bits")));
        }
        Ok(IntegerTensor {
            shape,
            bits,
            codes: PackedCodes::pack(codes, bits),
        })
    }

    pub fn to_codes(&self) -> Vec<u8> {
        self.codes.unpack()
    }
}

/// Raw classifier accumulators with per-channel real scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub acc: Vec<i64>,
    pub scale: Vec<f64>,
    /// Real-valued outputs from the exact-rational path, when used.
    pub exact_values: Option<Vec<f64>>,
}

impl Logits {
    /// Real value of every logit.
    pub fn values(&self) -> Vec<f64> {
        match &self.exact_values {
            Some(v) => v.clone(),
            None => self
                .acc
                .iter()
                .zip(&self.scale)
                .map(|(&a, &s)| a as f64 * s)
                .collect(),
        }
    }

    /// Index of the largest logit (lowest index on ties). Uses integer
    /// comparison when every channel shares one positive scale.
    pub fn argmax(&self) -> usize {
        let uniform = self.exact_values.is_none()
            && self.scale.first().is_some_and(|&s| s > 0.0)
            && self.scale.iter().all(|&s| s == self.scale[0]);
        if uniform {
            return argmax_by(&self.acc, |a, b| a > b);
        }
        argmax_by(&self.values(), |a, b| a > b)
    }
}

pub(crate) fn argmax_by<T: Copy>(v: &[T], greater: impl Fn(T, T) -> bool) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if greater(v[i], v[best]) {
            best = i;
        }
    }
    best
}

/// Value at a layer boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Codes(IntegerTensor),
    Logits(Logits),
}

impl Activation {
    pub fn as_codes(&self) -> Option<&IntegerTensor> {
        match self {
            Activation::Codes(t) => Some(t),
            Activation::Logits(_) => None,
        }
    }
}

/// Executor switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecOptions {
    /// Diagnostic mode: requantize with the unrounded bias and the exact
    /// real multiplier instead of `B_q` and `M0 * 2^N0`.
    pub exact: bool,
}

/// `Phi = sum (X - Z_x)(W - Z_w)` for every output element (channel-last).
/// Padding taps hold code `Z_x` and therefore contribute zero.
pub fn conv_int(x: &[u8], layer: &IntegerLayer) -> Vec<i32> {
    let inp = layer.input_shape;
    let out = layer.output_shape;
    let zx = layer.in_zero_point;
    let xs: Vec<i32> = x.iter().map(|&c| c as i32 - zx).collect();
    let codes = layer.weights.unpack();
    let per_channel = layer.filter_len();
    let ws: Vec<i32> = codes
        .iter()
        .enumerate()
        .map(|(i, &c)| c as i32 - layer.w_zero_point(i / per_channel))
        .collect();
    let (kh, kw) = layer.kernel;
    let (sh, sw) = layer.stride;
    let (ph, pw) = layer.padding;
    let depthwise = layer.kind == LayerKind::DepthwiseConv2d;
    let row = out.w * out.c;
    let mut acc = vec![0i32; out.h * row];
    acc.par_chunks_mut(row).enumerate().for_each(|(oh, dst)| {
        for ow in 0..out.w {
            for co in 0..out.c {
                let filter = &ws[co * per_channel..(co + 1) * per_channel];
                let mut sum = 0i32;
                for i in 0..kh {
                    let ih = (oh * sh + i) as isize - ph as isize;
                    if ih < 0 || ih >= inp.h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let iw = (ow * sw + j) as isize - pw as isize;
                        if iw < 0 || iw >= inp.w as isize {
                            continue;
                        }
                        let base = (ih as usize * inp.w + iw as usize) * inp.c;
                        if depthwise {
                            sum += xs[base + co] * filter[i * kw + j];
                        } else {
                            let taps = &filter[(i * kw + j) * inp.c..(i * kw + j + 1) * inp.c];
                            sum += xs[base..base + inp.c]
                                .iter()
                                .zip(taps)
                                .map(|(a, b)| a * b)
                                .sum::<i32>();
                        }
                    }
                }
                dst[ow * out.c + co] = sum;
            }
        }
    });
    acc
}

fn requantize(phi: i32, bq: i32, mult: &FixedPointMultiplier, z_y: i32, q_out: u8) -> u8 {
    let scaled = mult.apply(phi as i64 + bq as i64);
    (z_y as i64 + scaled).clamp(0, max_code(q_out) as i64) as u8
}

/// `Y = clamp(Z_y + floor(M0 * 2^N0 * (Phi + B_q)), 0, 2^Q - 1)` per channel.
pub fn icn_activate(phi: &[i32], params: &IcnParams) -> Vec<u8> {
    let channels = params.bq.len();
    phi.iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = i % channels;
            requantize(p, params.bq[c], &params.mult[c], params.z_y, params.q_out)
        })
        .collect()
}

/// Global average pool: per-channel mean of codes, floored.
pub fn avg_pool_int(x: &IntegerTensor) -> IntegerTensor {
    let codes = x.to_codes();
    let c = x.shape.c;
    let n = (x.shape.h * x.shape.w) as u64;
    let mut sums = vec![0u64; c];
    for (i, &v) in codes.iter().enumerate() {
        sums[i % c] += v as u64;
    }
    let out: Vec<u8> = sums.iter().map(|&s| (s / n) as u8).collect();
    IntegerTensor {
        shape: TensorShape::new(1, 1, c),
        bits: x.bits,
        codes: PackedCodes::pack(&out, x.bits),
    }
}

fn exact_floor_code(v: f64, z_y: i32, q_out: u8) -> u8 {
    (z_y as f64 + v.floor()).clamp(0.0, max_code(q_out) as f64) as u8
}

/// Runs one layer on its input activation.
pub fn run_layer(layer: &IntegerLayer, x: &IntegerTensor, opts: ExecOptions) -> Result<Activation> {
    if x.shape != layer.input_shape || x.bits != layer.in_bits {
        return Err(Error::Input(format!(
            "layer {} expects a {}-bit {} tensor, got {}-bit {}",
            layer.index, layer.in_bits, layer.input_shape, x.bits, x.shape
        )));
    }
    if let LayerOutput::AvgPool { .. } = layer.output {
        return Ok(Activation::Codes(avg_pool_int(x)));
    }
    let phi = conv_int(&x.to_codes(), layer);
    let channels = layer.output_shape.c;
    let exact = if opts.exact {
        Some(layer.exact.as_ref().ok_or_else(|| {
            Error::Input(format!("layer {} carries no exact-rational parameters", layer.index))
        })?)
    } else {
        None
    };
    let codes: Vec<u8> = match (&layer.output, exact) {
        (LayerOutput::Logits { bq, scale }, _) => {
            let acc: Vec<i64> = phi
                .iter()
                .enumerate()
                .map(|(i, &p)| p as i64 + bq[i % channels] as i64)
                .collect();
            let scale: Vec<f64> = (0..phi.len()).map(|i| scale[i % channels]).collect();
            let exact_values = exact.map(|e| {
                phi.iter()
                    .enumerate()
                    .map(|(i, &p)| scale[i] * (p as f64 + e.bias[i % channels]))
                    .collect()
            });
            return Ok(Activation::Logits(Logits {
                acc,
                scale,
                exact_values,
            }));
        }
        (LayerOutput::Icn(p), None) => icn_activate(&phi, p),
        (LayerOutput::Folded { bq, mult, z_y, q_out }, None) => phi
            .iter()
            .enumerate()
            .map(|(i, &p)| requantize(p, bq[i % channels], mult, *z_y, *q_out))
            .collect(),
        (LayerOutput::Icn(IcnParams { z_y, q_out, .. }), Some(e))
        | (LayerOutput::Folded { z_y, q_out, .. }, Some(e)) => phi
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = i % channels;
                exact_floor_code(e.mult[c] * (p as f64 + e.bias[c]), *z_y, *q_out)
            })
            .collect(),
        (LayerOutput::AvgPool { .. }, _) => unreachable!("handled above"),
    };
    let bits = layer.out_bits().expect("requantizing layer has output bits");
    Ok(Activation::Codes(IntegerTensor {
        shape: layer.output_shape,
        bits,
        codes: PackedCodes::pack(&codes, bits),
    }))
}

/// Values at every boundary after the input (one entry per layer).
pub fn run_integer_trace(
    graph: &IntegerGraph,
    input: &IntegerTensor,
    opts: ExecOptions,
) -> Result<Vec<Activation>> {
    if input.shape != graph.input_shape || input.bits != graph.input_spec.bits {
        return Err(Error::Input(format!(
            "graph expects a {}-bit {} input, got {}-bit {}",
            graph.input_spec.bits, graph.input_shape, input.bits, input.shape
        )));
    }
    let mut trace: Vec<Activation> = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let x = match trace.last() {
            None => input,
            Some(Activation::Codes(t)) => t,
            Some(Activation::Logits(_)) => {
                return Err(Error::Graph("logits must come from the last layer".into()))
            }
        };
        let y = run_layer(layer, x, opts)?;
        trace.push(y);
    }
    Ok(trace)
}

/// Integer-only forward pass; returns the final boundary.
pub fn run_integer(graph: &IntegerGraph, input: &IntegerTensor) -> Result<Activation> {
    let mut trace = run_integer_trace(graph, input, ExecOptions::default())?;
    Ok(trace.pop().expect("graph has at least one layer"))
}

/// Quantizes a float input with the graph's round-to-nearest input spec.
pub fn quantize_input(graph: &IntegerGraph, values: &[f32]) -> Result<IntegerTensor> {
    let codes: Vec<u8> = values
        .iter()
        .map(|&v| graph.input_spec.quantize(v as f64, 0))
        .collect();
    IntegerTensor::from_codes(graph.input_shape, graph.input_spec.bits, &codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed_point::decompose;

    fn params(bq: i32, m: f64, q_out: u8) -> IcnParams {
        IcnParams {
            bq: vec![bq],
            mult: vec![decompose(m).unwrap()],
            z_y: 0,
            q_out,
        }
    }

    #[test]
    fn icn_small_examples() {
        assert_eq!(icn_activate(&[4], &params(0, 0.5, 4)), vec![2]);
        assert_eq!(icn_activate(&[-100_000], &params(3, 0.5, 4)), vec![0]);
        assert_eq!(icn_activate(&[100_000], &params(3, 0.5, 4)), vec![15]);
    }

    #[test]
    fn avg_pool_examples() {
        let t = IntegerTensor::from_codes(TensorShape::new(2, 2, 1), 4, &[1, 2, 3, 4]).unwrap();
        assert_eq!(avg_pool_int(&t).to_codes(), vec![2]);
        let t = IntegerTensor::from_codes(TensorShape::new(3, 3, 1), 4, &[7; 9]).unwrap();
        assert_eq!(avg_pool_int(&t).to_codes(), vec![7]);
    }

    #[test]
    fn rejects_out_of_range_codes() {
        assert!(IntegerTensor::from_codes(TensorShape::new(1, 1, 1), 2, &[4]).is_err());
        assert!(IntegerTensor::from_codes(TensorShape::new(1, 1, 2), 2, &[1]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let l = Logits {
            acc: vec![3, 7, 7, -1],
            scale: vec![0.5; 4],
            exact_values: None,
        };
        assert_eq!(l.argmax(), 1);
        let l = Logits {
            acc: vec![3, 2],
            scale: vec![1.0, 2.0],
            exact_values: None,
        };
        assert_eq!(l.argmax(), 1);
    }
}
