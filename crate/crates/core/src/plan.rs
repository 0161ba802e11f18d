use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph};

/// Bit widths for every weight tensor and every activation boundary.
///
/// `q_act[i]` is the input precision of layer `i`; `q_act[i + 1]` is its
/// output precision, which is also the input precision of layer `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitPlan {
    pub q_w: Vec<u8>,
    pub q_act: Vec<u8>,
}

impl BitPlan {
    /// Every tensor at `bits` (the input stays at 8).
    pub fn uniform(layers: usize, bits: u8) -> BitPlan {
        Self::with_bits(layers, bits, bits)
    }

    pub fn with_bits(layers: usize, weight_bits: u8, act_bits: u8) -> BitPlan {
        let mut q_act = vec![act_bits; layers + 1];
        q_act[0] = 8;
        BitPlan {
            q_w: vec![weight_bits; layers],
            q_act,
        }
    }

    pub fn layers(&self) -> usize {
        self.q_w.len()
    }

    /// Input and output bits of layer `i`.
    pub fn act_bits(&self, i: usize) -> (u8, u8) {
        (self.q_act[i], self.q_act[i + 1])
    }

    /// Checks lengths, widths, the fixed 8-bit input and pool pass-through.
    pub fn validate(&self, graph: &NetworkGraph) -> Result<()> {
        let l = graph.layers.len();
        if self.q_w.len() != l || self.q_act.len() != l + 1 {
            return Err(Error::Plan(format!(
                "plan has {} weight and {} activation entries, graph needs {l} and {}",
                self.q_w.len(),
                self.q_act.len(),
                l + 1
            )));
        }
        if let Some(q) = self.q_w.iter().chain(&self.q_act).find(|q| !matches!(q, 2 | 4 | 8)) {
            return Err(Error::Plan(format!("bit width {q} not in {{2, 4, 8}}")));
        }
        if self.q_act[0] != 8 {
            return Err(Error::Plan("network input must stay at 8 bits".into()));
        }
        for layer in &graph.layers {
            let (qi, qo) = self.act_bits(layer.index);
            if layer.kind == LayerKind::AvgPool && qi != qo {
                return Err(Error::Plan(format!(
                    "avg_pool layer {} must keep its input precision ({qi} != {qo})",
                    layer.index
                )));
            }
        }
        Ok(())
    }
}
