//! Seeded random layer chains for property tests and verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{BatchNorm, LayerKind, LayerSpec, NetworkGraph, TensorShape};
use crate::oracle::run_float;

/// Shape limits of generated chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainLimits {
    pub min_layers: usize,
    pub max_layers: usize,
    pub max_spatial: usize,
    pub max_channels: usize,
    /// Allow a final fully-connected classifier.
    pub classifier: bool,
}

impl Default for ChainLimits {
    fn default() -> Self {
        ChainLimits {
            min_layers: 1,
            max_layers: 4,
            max_spatial: 7,
            max_channels: 6,
            classifier: true,
        }
    }
}

fn conv_like(
    rng: &mut ChaCha8Rng,
    index: usize,
    kind: LayerKind,
    input: TensorShape,
    max_channels: usize,
) -> LayerSpec {
    let (kernel, stride) = match kind {
        LayerKind::PointwiseConv2d => (1, 1),
        LayerKind::FullyConnected => (0, 1),
        _ => {
            let k = if input.h >= 3 && input.w >= 3 && rng.gen_bool(0.7) { 3 } else { 1 };
            (k, if rng.gen_bool(0.3) { 2 } else { 1 })
        }
    };
    let kernel = if kind == LayerKind::FullyConnected {
        (input.h, input.w)
    } else {
        (kernel, kernel)
    };
    let out_channels = match kind {
        LayerKind::DepthwiseConv2d => input.c,
        _ => rng.gen_range(1..=max_channels),
    };
    let padding = if kind == LayerKind::FullyConnected {
        (0, 0)
    } else {
        (kernel.0 / 2, kernel.1 / 2)
    };
    let mut layer = LayerSpec {
        index,
        kind,
        kernel,
        stride: (stride, stride),
        padding,
        in_channels: input.c,
        out_channels,
        weights: Vec::new(),
        bias: None,
        bn: None,
        act_range: (0.0, 1.0),
    };
    let fan_in = layer.filter_len();
    let bound = (3.0 / fan_in as f32).sqrt() * rng.gen_range(0.5..2.0);
    layer.weights = (0..layer.weight_count())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    if rng.gen_bool(0.5) || kind == LayerKind::FullyConnected {
        layer.bias = Some((0..out_channels).map(|_| rng.gen_range(-0.2..0.2)).collect());
    }
    if kind != LayerKind::FullyConnected {
        layer.bn = Some(BatchNorm {
            gamma: (0..out_channels)
                .map(|_| {
                    let g: f32 = rng.gen_range(0.5..1.5);
                    if rng.gen_bool(0.1) {
                        -g
                    } else {
                        g
                    }
                })
                .collect(),
            beta: (0..out_channels).map(|_| rng.gen_range(0.0..0.5)).collect(),
            mu: (0..out_channels).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            sigma: (0..out_channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
        });
    }
    layer
}

/// Random chain of convolutional layers, optionally ending in a global
/// average pool and/or a classifier. Activation ranges are calibrated from
/// float runs on random inputs.
pub fn random_chain(seed: u64, limits: ChainLimits) -> NetworkGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(limits.min_layers..=limits.max_layers);
    let side = rng.gen_range(3..=limits.max_spatial);
    let input_shape = TensorShape::new(side, side, rng.gen_range(1..=3));
    let mut shape = input_shape;
    let mut layers: Vec<LayerSpec> = Vec::with_capacity(count);
    let mut pooled = false;
    for index in 0..count {
        let last = index + 1 == count;
        let kind = if last && limits.classifier && rng.gen_bool(0.4) {
            LayerKind::FullyConnected
        } else if pooled {
            LayerKind::PointwiseConv2d
        } else if index > 0 && !last && rng.gen_bool(0.15) {
            LayerKind::AvgPool
        } else {
            match rng.gen_range(0..3) {
                0 => LayerKind::Conv2d,
                1 => LayerKind::DepthwiseConv2d,
                _ => LayerKind::PointwiseConv2d,
            }
        };
        let layer = if kind == LayerKind::AvgPool {
            pooled = true;
            LayerSpec {
                index,
                kind,
                kernel: (1, 1),
                stride: (1, 1),
                padding: (0, 0),
                in_channels: shape.c,
                out_channels: shape.c,
                weights: Vec::new(),
                bias: None,
                bn: None,
                act_range: (0.0, 1.0),
            }
        } else {
            conv_like(&mut rng, index, kind, shape, limits.max_channels)
        };
        shape = layer.output_shape(shape).expect("generated layer chains");
        layers.push(layer);
    }
    let mut graph = NetworkGraph {
        layers,
        input_shape,
        input_range: (-1.0, 1.0),
    };
    calibrate(&mut graph, &mut rng);
    graph
}

/// Sets every `act_range` to a fraction of the largest value seen on a few
/// random inputs, so that some outputs saturate.
fn calibrate(graph: &mut NetworkGraph, rng: &mut ChaCha8Rng) {
    for l in graph.layers.iter_mut() {
        l.act_range = (0.0, 1.0e30);
    }
    let inputs: Vec<Vec<f32>> = (0..4)
        .map(|_| {
            (0..graph.input_shape.elements())
                .map(|_| rng.gen_range(-1.0f32..=1.0))
                .collect()
        })
        .collect();
    let mut peak = vec![0.0f64; graph.layers.len()];
    for x in &inputs {
        let trace = run_float(graph, x).expect("generated chains are valid");
        for (p, y) in peak.iter_mut().zip(&trace) {
            *p = y.iter().fold(*p, |a, &v| a.max(v));
        }
    }
    let mut prev = 1.0f32;
    for (l, p) in graph.layers.iter_mut().zip(peak) {
        let b = if l.kind == LayerKind::AvgPool {
            prev
        } else {
            ((p * rng.gen_range(0.8..1.0)) as f32).max(0.05)
        };
        l.act_range = (0.0, b);
        prev = b;
    }
}
