//! MobilenetV1 architecture builder (conv, 13 depthwise-separable blocks,
//! global average pool, 1000-way classifier).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{BatchNorm, LayerKind, LayerSpec, NetworkGraph, TensorShape};

/// (output channels of the pointwise conv, depthwise stride) per block.
const BLOCKS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

pub const CLASSES: usize = 1000;

/// Standard input resolutions and width multipliers of the family.
pub const RESOLUTIONS: [usize; 4] = [128, 160, 192, 224];
pub const WIDTHS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// How parameters are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    /// Zero weights and identity batch-norm: only the shapes matter.
    Zeros,
    /// Random weights and batch-norm statistics from a seeded generator.
    Random(u64),
}

fn scaled(channels: usize, width: f64) -> usize {
    ((channels as f64 * width) as usize).max(8)
}

/// Activation range used for every ReLU6 output.
const RELU6: (f32, f32) = (0.0, 6.0);

struct Builder {
    rng: Option<ChaCha8Rng>,
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn weights(&mut self, count: usize, fan_in: usize) -> Vec<f32> {
        match &mut self.rng {
            None => vec![0.0; count],
            Some(rng) => {
                let bound = (3.0 / fan_in as f32).sqrt();
                (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        }
    }

    fn bn(&mut self, channels: usize) -> BatchNorm {
        match &mut self.rng {
            None => BatchNorm::identity(channels),
            Some(rng) => BatchNorm {
                gamma: (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
                beta: (0..channels).map(|_| rng.gen_range(0.0..0.5)).collect(),
                mu: (0..channels).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                sigma: (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
            },
        }
    }

    fn push(
        &mut self,
        kind: LayerKind,
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
    ) {
        let index = self.layers.len();
        let mut layer = LayerSpec {
            index,
            kind,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: if kernel == 3 { (1, 1) } else { (0, 0) },
            in_channels,
            out_channels,
            weights: Vec::new(),
            bias: None,
            bn: None,
            act_range: RELU6,
        };
        let fan_in = layer.filter_len();
        layer.weights = self.weights(layer.weight_count(), fan_in);
        layer.bn = Some(self.bn(out_channels));
        self.layers.push(layer);
    }
}

/// Builds MobilenetV1 for input `resolution` and width multiplier `width`.
pub fn mobilenet_v1(resolution: usize, width: f64, init: WeightInit) -> NetworkGraph {
    let mut b = Builder {
        rng: match init {
            WeightInit::Zeros => None,
            WeightInit::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        },
        layers: Vec::new(),
    };
    let mut channels = scaled(32, width);
    b.push(LayerKind::Conv2d, 3, 2, 3, channels);
    for &(out, stride) in &BLOCKS {
        b.push(LayerKind::DepthwiseConv2d, 3, stride, channels, channels);
        let out = scaled(out, width);
        b.push(LayerKind::PointwiseConv2d, 1, 1, channels, out);
        channels = out;
    }
    let index = b.layers.len();
    b.layers.push(LayerSpec {
        index,
        kind: LayerKind::AvgPool,
        kernel: (1, 1),
        stride: (1, 1),
        padding: (0, 0),
        in_channels: channels,
        out_channels: channels,
        weights: Vec::new(),
        bias: None,
        bn: None,
        act_range: RELU6,
    });
    let weights = b.weights(CLASSES * channels, channels);
    let bias = match &mut b.rng {
        None => vec![0.0; CLASSES],
        Some(rng) => (0..CLASSES).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    };
    b.layers.push(LayerSpec {
        index: index + 1,
        kind: LayerKind::FullyConnected,
        kernel: (1, 1),
        stride: (1, 1),
        padding: (0, 0),
        in_channels: channels,
        out_channels: CLASSES,
        weights,
        bias: Some(bias),
        bn: None,
        act_range: (0.0, 16.0),
    });
    NetworkGraph {
        layers: b.layers,
        input_shape: TensorShape::new(resolution, resolution, 3),
        input_range: (-1.0, 1.0),
    }
}

/// Label such as `224_1.0`.
pub fn label(resolution: usize, width: f64) -> String {
    format!("{resolution}_{width:?}")
}
