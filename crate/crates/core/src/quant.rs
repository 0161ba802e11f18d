//! Uniform affine quantization primitives.
//!
//! Codes are unsigned, in `[0, 2^Q - 1]`, and dequantize as `S * (code - Z)`
//! with an integer zero-point `Z`. Weight ranges are widened to include zero
//! and then snapped so that the grid endpoints are exactly `-S*Z` and
//! `S*(2^Q - 1 - Z)`. Activations use `a = 0` and a floor quantizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerLayer,
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantScheme {
    pub granularity: Granularity,
    pub symmetric: bool,
}

impl QuantScheme {
    pub const PER_LAYER: QuantScheme = QuantScheme {
        granularity: Granularity::PerLayer,
        symmetric: false,
    };
    pub const PER_CHANNEL: QuantScheme = QuantScheme {
        granularity: Granularity::PerChannel,
        symmetric: false,
    };
}

/// Quantization parameters of one tensor: one (scale, zero-point, range)
/// triple per channel group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub scheme: QuantScheme,
    pub scale: Vec<f64>,
    pub zero_point: Vec<i32>,
    /// Representable (a, b) per group.
    pub range: Vec<(f64, f64)>,
}

/// Whether a tensor is quantized with round-to-nearest (weights) or floor
/// (activations).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Weights,
    Activations,
}

pub fn check_bits(bits: u8) -> Result<u8> {
    match bits {
        2 | 4 | 8 => Ok(bits),
        other => Err(Error::BitWidth(other)),
    }
}

/// Largest code for `bits`: `2^Q - 1`.
pub fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// One step down the 8 → 4 → 2 ladder.
pub fn next_lower(bits: u8) -> Option<u8> {
    match bits {
        8 => Some(4),
        4 => Some(2),
        _ => None,
    }
}

/// Scale, zero-point and representable range for observed `[lo, hi]`.
fn affine_params(lo: f64, hi: f64, bits: u8, symmetric: bool) -> (f64, i32, (f64, f64)) {
    let (mut lo, mut hi) = (lo.min(0.0), hi.max(0.0));
    if symmetric {
        let m = lo.abs().max(hi.abs());
        lo = -m;
        hi = m;
    }
    let qmax = max_code(bits) as f64;
    if hi == lo {
        // constant channel: everything lands on code Z, which is real 0
        return (1.0, 0, (lo, lo));
    }
    let scale = (hi - lo) / qmax;
    let zp = (-lo / scale).round().clamp(0.0, qmax);
    let range = (scale * (0.0 - zp), scale * (qmax - zp));
    (scale, zp as i32, range)
}

impl QuantSpec {
    /// Number of channel groups (1 for per-layer).
    pub fn groups(&self) -> usize {
        self.scale.len()
    }

    pub fn max_code(&self) -> u32 {
        max_code(self.bits)
    }

    /// Spec for a tensor whose observed values span `[lo, hi]`.
    pub fn from_range(lo: f64, hi: f64, bits: u8, symmetric: bool) -> Result<QuantSpec> {
        check_bits(bits)?;
        let (scale, zp, range) = affine_params(lo, hi, bits, symmetric);
        Ok(QuantSpec {
            bits,
            scheme: QuantScheme {
                granularity: Granularity::PerLayer,
                symmetric,
            },
            scale: vec![scale],
            zero_point: vec![zp],
            range: vec![range],
        })
    }

    /// Activation spec over `[0, b]` with `S = b / (2^Q - 1)` and `Z = 0`.
    pub fn activation(b: f64, bits: u8) -> Result<QuantSpec> {
        check_bits(bits)?;
        let scale = if b > 0.0 { b / max_code(bits) as f64 } else { 1.0 };
        Ok(QuantSpec {
            bits,
            scheme: QuantScheme::PER_LAYER,
            scale: vec![scale],
            zero_point: vec![0],
            range: vec![(0.0, b.max(0.0))],
        })
    }

    fn group_of(&self, channel: usize) -> usize {
        if self.scale.len() == 1 {
            0
        } else {
            channel
        }
    }

    pub fn scale_for(&self, channel: usize) -> f64 {
        self.scale[self.group_of(channel)]
    }

    pub fn zero_point_for(&self, channel: usize) -> i32 {
        self.zero_point[self.group_of(channel)]
    }

    /// Round-to-nearest (ties away from zero) code for `t` in group `group`.
    pub fn quantize(&self, t: f64, group: usize) -> u8 {
        let g = self.group_of(group);
        let (s, z) = (self.scale[g], self.zero_point[g] as f64);
        let code = (t / s).round() + z;
        code.clamp(0.0, self.max_code() as f64) as u8
    }

    pub fn dequantize(&self, code: u8, group: usize) -> f64 {
        let g = self.group_of(group);
        self.scale[g] * (code as i32 - self.zero_point[g]) as f64
    }
}

/// Derives a weight spec from min/max statistics, per layer or per output
/// channel (`weights` is c_O-major with `channels` outer slices).
pub fn derive_weight_spec(
    weights: &[f32],
    channels: usize,
    bits: u8,
    scheme: QuantScheme,
) -> Result<QuantSpec> {
    check_bits(bits)?;
    if weights.is_empty() {
        return Err(Error::Graph("cannot quantize an empty weight tensor".into()));
    }
    if let Some(index) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let slices: Vec<&[f32]> = match scheme.granularity {
        Granularity::PerLayer => vec![weights],
        Granularity::PerChannel => {
            if channels == 0 || weights.len() % channels != 0 {
                return Err(Error::Graph(format!(
                    "{} weights do not split into {channels} channels",
                    weights.len()
                )));
            }
            weights.chunks(weights.len() / channels).collect()
        }
    };
    let mut spec = QuantSpec {
        bits,
        scheme,
        scale: Vec::with_capacity(slices.len()),
        zero_point: Vec::with_capacity(slices.len()),
        range: Vec::with_capacity(slices.len()),
    };
    for slice in slices {
        let (lo, hi) = slice
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| {
                (lo.min(w as f64), hi.max(w as f64))
            });
        let (s, z, r) = affine_params(lo, hi, bits, scheme.symmetric);
        spec.scale.push(s);
        spec.zero_point.push(z);
        spec.range.push(r);
    }
    Ok(spec)
}

/// Quantizes a c_O-major weight tensor to codes.
pub fn quantize_weights(weights: &[f32], spec: &QuantSpec) -> Vec<u8> {
    let per_group = weights.len() / spec.groups().max(1);
    weights
        .iter()
        .enumerate()
        .map(|(i, &w)| spec.quantize(w as f64, i / per_group.max(1)))
        .collect()
}

/// Floor activation quantizer: `clamp(floor(clamp(x, 0, b) / S), 0, 2^Q - 1)`.
///
/// The floor is evaluated against the dequantized grid itself, so a value
/// equal to `S * k` always maps back to `k`.
pub fn quant_act(x: f64, spec: &QuantSpec) -> u8 {
    let qmax = spec.max_code() as i64;
    let (s, b) = (spec.scale[0], spec.range[0].1);
    if !(x > 0.0) {
        return 0;
    }
    if x >= b {
        return qmax as u8;
    }
    let mut code = ((x / s).floor() as i64).clamp(0, qmax);
    while code > 0 && s * code as f64 > x {
        code -= 1;
    }
    while code < qmax && s * (code + 1) as f64 <= x {
        code += 1;
    }
    code as u8
}

/// Quantize-then-dequantize in float.
pub fn fake_quantize(t: &[f64], spec: &QuantSpec, mode: Mode) -> Vec<f64> {
    let per_group = (t.len() / spec.groups().max(1)).max(1);
    t.iter()
        .enumerate()
        .map(|(i, &x)| {
            let group = i / per_group;
            let code = match mode {
                Mode::Weights => spec.quantize(x, group),
                Mode::Activations => quant_act(x, spec),
            };
            spec.dequantize(code, group)
        })
        .collect()
}
