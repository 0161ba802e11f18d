//! Read-only and read-write footprints of a quantized network.
//!
//! Per-layer static parameters use these widths: `Z_x`, `Z_y` and per-layer
//! `Z_w` one byte each, per-channel `Z_w` two bytes, `B_q` and `M0` four
//! bytes, `N0` one byte. The final classifier is modeled as bias-only
//! (`B_q` per channel plus one scalar multiplier). Footprints count only
//! layer tensors: code, I/O buffers and stack are out of scope.

use serde::Serialize;

use crate::graph::{LayerKind, LayerSpec, NetworkGraph};
use crate::mobilenet::{self, WeightInit};
use crate::mode::QuantMode;
use crate::plan::BitPlan;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * 1024;

/// Device memory constraint in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
pub struct MemoryBudget {
    pub m_ro: u64,
    pub m_rw: u64,
}

impl MemoryBudget {
    pub fn new(m_ro: u64, m_rw: u64) -> Self {
        MemoryBudget { m_ro, m_rw }
    }
}

/// Bytes of a tensor of `count` elements at `bits` each.
pub fn mem(count: u64, bits: u8) -> u64 {
    (count * bits as u64).div_ceil(8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LayerFootprint {
    pub weight_bytes: u64,
    pub aux_bytes: u64,
    pub in_act_bytes: u64,
    pub out_act_bytes: u64,
}

impl LayerFootprint {
    pub fn ro_bytes(&self) -> u64 {
        self.weight_bytes + self.aux_bytes
    }

    pub fn rw_bytes(&self) -> u64 {
        self.in_act_bytes + self.out_act_bytes
    }
}

/// Bytes per stored threshold in the thresholds mode, fixed by
/// [`calibrate_threshold_bytes`] against the reference footprint.
pub const DEFAULT_THRESHOLD_BYTES: u64 = 2;

/// Footprint model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryModel {
    pub threshold_bytes: u64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        MemoryModel {
            threshold_bytes: DEFAULT_THRESHOLD_BYTES,
        }
    }
}

fn is_classifier(graph: &NetworkGraph, layer: &LayerSpec) -> bool {
    layer.kind == LayerKind::FullyConnected && layer.index + 1 == graph.layers.len()
}

impl MemoryModel {
    /// Static parameter bytes besides the weights. `q_out` is the output
    /// activation width, used only by the thresholds mode.
    pub fn aux_bytes(&self, layer: &LayerSpec, mode: QuantMode, q_out: u8, classifier: bool) -> u64 {
        if !layer.kind.has_weights() {
            return 0;
        }
        let c = layer.out_channels as u64;
        let z_w = if mode.per_channel() { 2 * c } else { 1 };
        if classifier {
            // Z_x + Z_w + B_q + scalar M0 + scalar N0 + Z_y
            return 1 + z_w + 4 * c + 4 + 1 + 1;
        }
        match mode {
            QuantMode::PlFb => 1 + 1 + 4 * c + 4 + 1 + 1,
            QuantMode::PlIcn => 1 + 1 + 4 * c + 4 * c + c + 1,
            QuantMode::PcIcn => 1 + 2 * c + 4 * c + 4 * c + c + 1,
            QuantMode::PcThresholds => 1 + 2 * c + 1 + c * (1u64 << q_out) * self.threshold_bytes,
        }
    }

    pub fn layer_footprints(
        &self,
        graph: &NetworkGraph,
        plan: &BitPlan,
        mode: QuantMode,
    ) -> Vec<LayerFootprint> {
        let shapes = graph
            .boundary_shapes()
            .expect("footprints need a graph with valid shapes");
        graph
            .layers
            .iter()
            .map(|l| {
                let (qi, qo) = plan.act_bits(l.index);
                LayerFootprint {
                    weight_bytes: mem(l.weight_count() as u64, plan.q_w[l.index]),
                    aux_bytes: self.aux_bytes(l, mode, qo, is_classifier(graph, l)),
                    in_act_bytes: mem(shapes[l.index].elements() as u64, qi),
                    out_act_bytes: mem(shapes[l.index + 1].elements() as u64, qo),
                }
            })
            .collect()
    }

    /// Sum of weight and auxiliary bytes over all layers.
    pub fn ro_footprint(&self, graph: &NetworkGraph, plan: &BitPlan, mode: QuantMode) -> u64 {
        self.layer_footprints(graph, plan, mode)
            .iter()
            .map(LayerFootprint::ro_bytes)
            .sum()
    }
}

/// Input plus output activation bytes of every layer.
pub fn rw_footprint_per_layer(graph: &NetworkGraph, plan: &BitPlan) -> Vec<u64> {
    MemoryModel::default()
        .layer_footprints(graph, plan, QuantMode::PlFb)
        .iter()
        .map(LayerFootprint::rw_bytes)
        .collect()
}

/// All parameters (weights, biases, batch-norm vectors) stored as f32.
pub fn full_precision_bytes(graph: &NetworkGraph) -> u64 {
    4 * graph.parameter_count() as u64
}

/// Footprint of the thresholds reference point used for calibration:
/// MobilenetV1 224_1.0, 4-bit weights and activations, 2.35 MiB.
pub const THRESHOLD_REFERENCE_BYTES: f64 = 2.35 * MIB as f64;

/// Outcome of fitting the threshold width to a reference footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdCalibration {
    pub threshold_bytes: u64,
    pub modeled_bytes: u64,
    pub reference_bytes: f64,
    /// (modeled - reference) / reference
    pub delta: f64,
}

/// Picks the threshold width (1, 2 or 4 bytes) whose modeled footprint is
/// closest to `reference_bytes`.
pub fn calibrate_threshold_bytes(
    graph: &NetworkGraph,
    plan: &BitPlan,
    reference_bytes: f64,
) -> ThresholdCalibration {
    [1u64, 2, 4]
        .into_iter()
        .map(|t| {
            let modeled = MemoryModel { threshold_bytes: t }.ro_footprint(
                graph,
                plan,
                QuantMode::PcThresholds,
            );
            ThresholdCalibration {
                threshold_bytes: t,
                modeled_bytes: modeled,
                reference_bytes,
                delta: (modeled as f64 - reference_bytes) / reference_bytes,
            }
        })
        .min_by(|a, b| a.delta.abs().total_cmp(&b.delta.abs()))
        .expect("three candidates")
}

/// Calibration against the MobilenetV1 224_1.0 INT4 reference point.
pub fn reference_threshold_calibration() -> ThresholdCalibration {
    let graph = mobilenet::mobilenet_v1(224, 1.0, WeightInit::Zeros);
    let plan = BitPlan::uniform(graph.layers.len(), 4);
    calibrate_threshold_bytes(&graph, &plan, THRESHOLD_REFERENCE_BYTES)
}

/// One row of a [`MemoryReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMemoryRow {
    pub index: usize,
    pub kind: &'static str,
    pub q_w: Option<u8>,
    pub q_x: u8,
    pub q_y: u8,
    #[serde(flatten)]
    pub footprint: LayerFootprint,
}

/// Per-layer and total footprints of a graph under a plan and mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub schema_version: u32,
    pub mode: QuantMode,
    pub threshold_bytes: u64,
    pub layers: Vec<LayerMemoryRow>,
    pub ro_bytes: u64,
    /// Largest per-layer activation footprint.
    pub rw_peak_bytes: u64,
    pub full_precision_bytes: u64,
}

pub fn memory_report(graph: &NetworkGraph, plan: &BitPlan, mode: QuantMode, model: &MemoryModel) -> MemoryReport {
    let footprints = model.layer_footprints(graph, plan, mode);
    let layers: Vec<LayerMemoryRow> = graph
        .layers
        .iter()
        .zip(&footprints)
        .map(|(l, f)| {
            let (q_x, q_y) = plan.act_bits(l.index);
            LayerMemoryRow {
                index: l.index,
                kind: l.kind.name(),
                q_w: l.kind.has_weights().then_some(plan.q_w[l.index]),
                q_x,
                q_y,
                footprint: *f,
            }
        })
        .collect();
    MemoryReport {
        schema_version: crate::SCHEMA_VERSION,
        mode,
        threshold_bytes: model.threshold_bytes,
        ro_bytes: footprints.iter().map(LayerFootprint::ro_bytes).sum(),
        rw_peak_bytes: footprints.iter().map(LayerFootprint::rw_bytes).max().unwrap_or(0),
        full_precision_bytes: full_precision_bytes(graph),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(c_out: usize) -> LayerSpec {
        LayerSpec {
            index: 0,
            kind: LayerKind::PointwiseConv2d,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            in_channels: 4,
            out_channels: c_out,
            weights: vec![0.0; 4 * c_out],
            bias: None,
            bn: None,
            act_range: (0.0, 1.0),
        }
    }

    #[test]
    fn mem_rounds_up() {
        assert_eq!(mem(1000, 4), 500);
        assert_eq!(mem(1, 2), 1);
        assert_eq!(mem(3_228_864, 8), 3_228_864);
        assert_eq!(mem(3, 2), 1);
        assert_eq!(mem(5, 2), 2);
    }

    #[test]
    fn aux_rows() {
        let m = MemoryModel::default();
        assert_eq!(m.aux_bytes(&conv(1), QuantMode::PlFb, 8, false), 12);
        assert_eq!(m.aux_bytes(&conv(64), QuantMode::PcIcn, 8, false), 706);
        assert_eq!(m.aux_bytes(&conv(64), QuantMode::PlIcn, 8, false), 1 + 1 + 256 + 256 + 64 + 1);
        assert_eq!(
            m.aux_bytes(&conv(64), QuantMode::PcThresholds, 4, false),
            1 + 128 + 1 + 64 * 16 * 2
        );
    }

    #[test]
    fn mode_ordering_with_many_channels() {
        let m = MemoryModel::default();
        for c in [2, 16, 1000] {
            for q in [4u8, 8] {
                let l = conv(c);
                let a: Vec<u64> = QuantMode::ALL
                    .iter()
                    .map(|&mode| m.aux_bytes(&l, mode, q, false))
                    .collect();
                assert!(a.windows(2).all(|w| w[0] < w[1]), "c={c} q={q}: {a:?}");
            }
        }
    }

    #[test]
    fn thresholds_grow_exponentially_with_output_bits() {
        let m = MemoryModel::default();
        let l = conv(32);
        let t = |q| m.aux_bytes(&l, QuantMode::PcThresholds, q, false) - (1 + 64 + 1);
        assert_eq!(t(4), 4 * t(2));
        assert_eq!(t(8), 16 * t(4));
    }
}
