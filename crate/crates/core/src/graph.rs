//! Network description: layer chain, float parameters and calibrated ranges.
//!
//! Weight tensors are stored c_O-major (`c_O × k_h × k_w × c_I`, with
//! `c_I = 1` for depthwise layers) and activations channel-last (`h × w × c`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation tensor shape, batch always 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl TensorShape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        TensorShape { n: 1, h, w, c }
    }

    /// Element count, or `None` if it does not fit in 63 bits.
    pub fn checked_elements(&self) -> Option<u64> {
        let total = (self.n as u64)
            .checked_mul(self.h as u64)?
            .checked_mul(self.w as u64)?
            .checked_mul(self.c as u64)?;
        (total <= i64::MAX as u64).then_some(total)
    }

    pub fn elements(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.n != 1 {
            return Err(format!("batch must be 1, got {}", self.n));
        }
        if self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(format!("zero dimension in {}x{}x{}", self.h, self.w, self.c));
        }
        self.checked_elements()
            .map(|_| ())
            .ok_or_else(|| "element count overflows 63 bits".to_string())
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// Per-channel batch-normalization statistics and affine parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mu: vec![0.0; channels],
            sigma: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn validate(&self, layer: usize, channels: usize) -> Result<()> {
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("mu", &self.mu),
            ("sigma", &self.sigma),
        ] {
            if v.len() != channels {
                return Err(Error::Shape {
                    layer,
                    msg: format!("bn.{name} has {} entries, expected {channels}", v.len()),
                });
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Invariant {
                    layer,
                    msg: format!("bn.{name}[{i}] is not finite"),
                });
            }
        }
        if let Some(i) = self.sigma.iter().position(|&s| s <= 0.0) {
            return Err(Error::Invariant {
                layer,
                msg: format!("bn.sigma[{i}] = {} must be > 0 (channel {i})", self.sigma[i]),
            });
        }
        if let Some(i) = self.gamma.iter().position(|&g| g == 0.0) {
            return Err(Error::Invariant {
                layer,
                msg: format!("bn.gamma[{i}] must be non-zero (channel {i})"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    PointwiseConv2d,
    FullyConnected,
    AvgPool,
}

impl LayerKind {
    pub fn has_weights(self) -> bool {
        self != LayerKind::AvgPool
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::DepthwiseConv2d => "depthwise_conv2d",
            LayerKind::PointwiseConv2d => "pointwise_conv2d",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::AvgPool => "avg_pool",
        }
    }
}

/// One layer of the chain with its float parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    /// (k_h, k_w)
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    /// Empty for `AvgPool`.
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub bn: Option<BatchNorm>,
    /// Calibrated output clamp range (a, b) with a = 0. For `AvgPool` this
    /// mirrors the incoming boundary, since pooling keeps its input grid.
    pub act_range: (f32, f32),
}

impl LayerSpec {
    /// Input channels seen by one filter: 1 for depthwise, c_I otherwise.
    pub fn filter_depth(&self) -> usize {
        match self.kind {
            LayerKind::DepthwiseConv2d => 1,
            _ => self.in_channels,
        }
    }

    /// Weights per output channel (k_h · k_w · filter depth).
    pub fn filter_len(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.filter_depth()
    }

    pub fn weight_count(&self) -> usize {
        if self.kind.has_weights() {
            self.out_channels * self.filter_len()
        } else {
            0
        }
    }

    /// Bias vector, defaulting to zeros when absent.
    pub fn bias_or_zero(&self) -> Vec<f32> {
        self.bias
            .clone()
            .unwrap_or_else(|| vec![0.0; self.out_channels])
    }

    /// Output shape for the given input shape.
    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape> {
        let layer = self.index;
        if input.c != self.in_channels {
            return Err(Error::Shape {
                layer,
                msg: format!(
                    "input has {} channels, layer expects {}",
                    input.c, self.in_channels
                ),
            });
        }
        match self.kind {
            LayerKind::AvgPool => Ok(TensorShape::new(1, 1, input.c)),
            LayerKind::FullyConnected => {
                if self.kernel != (input.h, input.w) {
                    return Err(Error::Shape {
                        layer,
                        msg: format!(
                            "fully_connected kernel {:?} must cover the {}x{} input",
                            self.kernel, input.h, input.w
                        ),
                    });
                }
                Ok(TensorShape::new(1, 1, self.out_channels))
            }
            _ => {
                let out_dim = |inp: usize, pad: usize, k: usize, s: usize| -> Result<usize> {
                    let span = (inp + 2 * pad) as i64 - k as i64;
                    if span < 0 {
                        return Err(Error::Shape {
                            layer,
                            msg: format!("kernel {k} larger than padded input {}", inp + 2 * pad),
                        });
                    }
                    Ok(span as usize / s + 1)
                };
                let h = out_dim(input.h, self.padding.0, self.kernel.0, self.stride.0)?;
                let w = out_dim(input.w, self.padding.1, self.kernel.1, self.stride.1)?;
                Ok(TensorShape::new(h, w, self.out_channels))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let layer = self.index;
        let inv = |msg: String| Error::Invariant { layer, msg };
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(inv("channel counts must be positive".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(inv("kernel and stride must be positive".into()));
        }
        match self.kind {
            LayerKind::DepthwiseConv2d | LayerKind::AvgPool
                if self.in_channels != self.out_channels =>
            {
                return Err(inv(format!(
                    "{} requires in_channels == out_channels ({} != {})",
                    self.kind.name(),
                    self.in_channels,
                    self.out_channels
                )));
            }
            LayerKind::PointwiseConv2d if self.kernel != (1, 1) => {
                return Err(inv("pointwise_conv2d requires a 1x1 kernel".into()));
            }
            LayerKind::FullyConnected if self.stride != (1, 1) || self.padding != (0, 0) => {
                return Err(inv("fully_connected takes no stride or padding".into()));
            }
            _ => {}
        }
        if self.kind == LayerKind::AvgPool {
            if !self.weights.is_empty() || self.bias.is_some() || self.bn.is_some() {
                return Err(inv("avg_pool carries no weights, bias or bn".into()));
            }
            return Ok(());
        }
        if self.weights.len() != self.weight_count() {
            return Err(Error::Shape {
                layer,
                msg: format!(
                    "weights have {} elements, expected {}",
                    self.weights.len(),
                    self.weight_count()
                ),
            });
        }
        if let Some(i) = self.weights.iter().position(|w| !w.is_finite()) {
            return Err(inv(format!("weight {i} is not finite")));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::Shape {
                    layer,
                    msg: format!("bias has {} entries, expected {}", b.len(), self.out_channels),
                });
            }
            if b.iter().any(|x| !x.is_finite()) {
                return Err(inv("bias is not finite".into()));
            }
        }
        if let Some(bn) = &self.bn {
            bn.validate(layer, self.out_channels)?;
        }
        let (a, b) = self.act_range;
        if !(a.is_finite() && b.is_finite()) || a != 0.0 || b < a {
            return Err(inv(format!("act_range ({a}, {b}) must satisfy a = 0 <= b")));
        }
        Ok(())
    }
}

/// Linear chain of layers plus the input tensor description.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub layers: Vec<LayerSpec>,
    pub input_shape: TensorShape,
    pub input_range: (f32, f32),
}

/// Input and output activation shape of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerShapes {
    pub input: TensorShape,
    pub output: TensorShape,
}

impl NetworkGraph {
    /// Checks every layer invariant and the shape chaining.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Graph("graph has no layers".into()));
        }
        self.input_shape.validate().map_err(Error::Graph)?;
        let (a, b) = self.input_range;
        if !(a.is_finite() && b.is_finite()) || b < a {
            return Err(Error::Graph(format!("input_range ({a}, {b}) is invalid")));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.index != i {
                return Err(Error::Invariant {
                    layer: i,
                    msg: format!("index field is {}, expected {i}", layer.index),
                });
            }
            layer.validate()?;
        }
        self.infer_shapes().map(|_| ())
    }

    /// Activation shapes at every layer boundary.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShapes>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape;
        for layer in &self.layers {
            let output = layer.output_shape(current)?;
            output.validate().map_err(|msg| Error::Shape {
                layer: layer.index,
                msg,
            })?;
            shapes.push(LayerShapes {
                input: current,
                output,
            });
            current = output;
        }
        Ok(shapes)
    }

    /// Shapes of the L + 1 activation boundaries (input first).
    pub fn boundary_shapes(&self) -> Result<Vec<TensorShape>> {
        let per_layer = self.infer_shapes()?;
        let mut out = Vec::with_capacity(per_layer.len() + 1);
        out.push(self.input_shape);
        out.extend(per_layer.iter().map(|s| s.output));
        Ok(out)
    }

    /// Total float parameter count: weights, biases and all bn vectors.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weights.len()
                    + l.bias.as_ref().map_or(0, Vec::len)
                    + l.bn.as_ref().map_or(0, |bn| 4 * bn.channels())
            })
            .sum()
    }

    /// True when the last layer is the classifier whose output stays as raw
    /// accumulators.
    pub fn has_logits(&self) -> bool {
        self.layers
            .last()
            .is_some_and(|l| l.kind == LayerKind::FullyConnected)
    }
}
