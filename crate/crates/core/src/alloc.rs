//! Memory-driven mixed-precision bit allocation.
//!
//! Activation bits are cut first (forward/backward sweeps over the layer
//! chain), then weight bits (greedy on the largest share of weight memory).
//! Every cut is one step down the 8 → 4 → 2 ladder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, InfeasibleReport, Result};
use crate::graph::{LayerKind, NetworkGraph};
use crate::memory::{mem, MemoryBudget, MemoryModel};
use crate::mode::QuantMode;
use crate::plan::BitPlan;
use crate::quant::next_lower;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocConfig {
    pub q_a_min: u8,
    pub q_w_min: u8,
    /// Margin below the top weight share within which the lowest layer index
    /// wins.
    pub delta: f64,
    /// Also cut an activation whose footprint merely equals the other tensor
    /// of the layer at equal bits. Off by default: the literal predicate only
    /// cuts on a strictly larger footprint.
    #[serde(default)]
    pub cut_on_equal_footprint: bool,
}

impl Default for AllocConfig {
    fn default() -> Self {
        AllocConfig {
            q_a_min: 4,
            q_w_min: 2,
            delta: 0.05,
            cut_on_equal_footprint: false,
        }
    }
}

impl AllocConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, q) in [("q_a_min", self.q_a_min), ("q_w_min", self.q_w_min)] {
            if !matches!(q, 2 | 4 | 8) {
                return Err(Error::Input(format!("{name} = {q} not in {{2, 4, 8}}")));
            }
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Input(format!("delta = {} not in [0, 1)", self.delta)));
        }
        Ok(())
    }
}

/// True when the activation `x2` should lose one step of precision relative
/// to the other activation `x1` of the same layer.
pub fn cut_bits_predicate(x1_count: u64, q_x1: u8, x2_count: u64, q_x2: u8, q_a_min: u8) -> bool {
    q_x2 > q_a_min
        && (q_x2 > q_x1 || (q_x2 == q_x1 && mem(x2_count, q_x2) > mem(x1_count, q_x1)))
}

fn cut_bits(config: &AllocConfig, x1_count: u64, q_x1: u8, x2_count: u64, q_x2: u8) -> bool {
    if config.cut_on_equal_footprint {
        q_x2 > config.q_a_min
            && (q_x2 > q_x1 || (q_x2 == q_x1 && mem(x2_count, q_x2) >= mem(x1_count, q_x1)))
    } else {
        cut_bits_predicate(x1_count, q_x1, x2_count, q_x2, config.q_a_min)
    }
}

/// The activation side of the problem: element counts of the L + 1
/// boundaries and which layers pass their input precision through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationChain {
    pub counts: Vec<u64>,
    /// `pass_through[i]` ties boundary `i` and `i + 1` (average pooling).
    pub pass_through: Vec<bool>,
}

impl ActivationChain {
    pub fn from_graph(graph: &NetworkGraph) -> Result<Self> {
        let counts = graph
            .boundary_shapes()?
            .iter()
            .map(|s| s.elements() as u64)
            .collect();
        let pass_through = graph
            .layers
            .iter()
            .map(|l| l.kind == LayerKind::AvgPool)
            .collect();
        Ok(ActivationChain {
            counts,
            pass_through,
        })
    }

    pub fn layers(&self) -> usize {
        self.pass_through.len()
    }

    /// Input plus output activation bytes of layer `i`.
    pub fn layer_bytes(&self, q: &[u8], i: usize) -> u64 {
        mem(self.counts[i], q[i]) + mem(self.counts[i + 1], q[i + 1])
    }

    /// Layers whose activations exceed `m_rw`, with their footprint.
    pub fn violations(&self, q: &[u8], m_rw: u64) -> Vec<(usize, u64)> {
        (0..self.layers())
            .map(|i| (i, self.layer_bytes(q, i)))
            .filter(|&(_, bytes)| bytes > m_rw)
            .collect()
    }

    /// Boundaries that change together with boundary `j`.
    fn group(&self, j: usize) -> std::ops::RangeInclusive<usize> {
        let mut lo = j;
        while lo > 0 && self.pass_through[lo - 1] {
            lo -= 1;
        }
        let mut hi = j;
        while hi < self.layers() && self.pass_through[hi] {
            hi += 1;
        }
        lo..=hi
    }

    /// Decrements boundary `j` (and its tied group). Returns false when the
    /// group holds the fixed network input or is already at 2 bits.
    fn cut(&self, q: &mut [u8], j: usize) -> bool {
        let group = self.group(j);
        if *group.start() == 0 {
            return false;
        }
        let Some(lower) = next_lower(q[j]) else {
            return false;
        };
        for k in group {
            q[k] = lower;
        }
        true
    }
}

/// Cuts activation bits until every layer's input plus output fits in
/// `m_rw`. Returns the L + 1 boundary widths.
pub fn cut_activations(chain: &ActivationChain, m_rw: u64, config: &AllocConfig) -> Result<Vec<u8>> {
    let l = chain.layers();
    let mut q = vec![8u8; l + 1];
    while !chain.violations(&q, m_rw).is_empty() {
        let before = q.clone();
        // forward pass: cut the output of layer i
        for i in 0..l.saturating_sub(1) {
            while chain.layer_bytes(&q, i) > m_rw
                && cut_bits(config, chain.counts[i], q[i], chain.counts[i + 1], q[i + 1])
                && chain.cut(&mut q, i + 1)
            {}
        }
        // backward pass: cut the input of layer i
        for i in (1..l).rev() {
            while chain.layer_bytes(&q, i) > m_rw
                && cut_bits(config, chain.counts[i + 1], q[i + 1], chain.counts[i], q[i])
                && chain.cut(&mut q, i)
            {}
        }
        if q == before {
            return Err(Error::Infeasible(InfeasibleReport {
                constraint: "read-write",
                budget: m_rw,
                violations: chain.violations(&q, m_rw),
            }));
        }
    }
    Ok(q)
}

/// Activation widths for `graph` under `budget.m_rw`.
pub fn cut_activation_bits(
    graph: &NetworkGraph,
    budget: &MemoryBudget,
    config: &AllocConfig,
) -> Result<Vec<u8>> {
    cut_activations(&ActivationChain::from_graph(graph)?, budget.m_rw, config)
}

/// Cuts weight bits until the weight bytes plus `aux_bytes` fit in `m_ro`.
/// Layers with zero weights keep 8 bits.
pub fn cut_weights(weight_counts: &[u64], aux_bytes: u64, m_ro: u64, config: &AllocConfig) -> Result<Vec<u8>> {
    let mut q = vec![8u8; weight_counts.len()];
    loop {
        let bytes: Vec<u64> = weight_counts.iter().zip(&q).map(|(&n, &b)| mem(n, b)).collect();
        let total: u64 = bytes.iter().sum();
        if total + aux_bytes <= m_ro {
            return Ok(q);
        }
        let candidates: Vec<(usize, f64)> = (0..q.len())
            .filter(|&i| weight_counts[i] > 0 && q[i] > config.q_w_min)
            .map(|i| (i, bytes[i] as f64 / total as f64))
            .collect();
        let Some(r_max) = candidates.iter().map(|&(_, r)| r).reduce(f64::max) else {
            return Err(Error::Infeasible(InfeasibleReport {
                constraint: "read-only",
                budget: m_ro,
                violations: bytes
                    .iter()
                    .enumerate()
                    .filter(|&(_, &b)| b > 0)
                    .map(|(i, &b)| (i, b))
                    .collect(),
            }));
        };
        // the top share always qualifies, so delta = 0 picks the first maximum
        let k = candidates
            .iter()
            .find(|&&(_, r)| r > r_max - config.delta || r == r_max)
            .map(|&(i, _)| i)
            .expect("the maximum is a candidate");
        q[k] = next_lower(q[k]).expect("candidate is above the minimum");
    }
}

/// Weight widths for `graph` given fixed activation widths.
pub fn cut_weight_bits(
    graph: &NetworkGraph,
    budget: &MemoryBudget,
    mode: QuantMode,
    config: &AllocConfig,
    q_act: &[u8],
    model: &MemoryModel,
) -> Result<Vec<u8>> {
    let l = graph.layers.len();
    let probe = BitPlan {
        q_w: vec![8; l],
        q_act: q_act.to_vec(),
    };
    // aux bytes do not depend on weight bits
    let aux: u64 = model
        .layer_footprints(graph, &probe, mode)
        .iter()
        .map(|f| f.aux_bytes)
        .sum();
    let counts: Vec<u64> = graph.layers.iter().map(|l| l.weight_count() as u64).collect();
    cut_weights(&counts, aux, budget.m_ro, config)
}

/// Full allocation with the default memory model.
pub fn allocate(
    graph: &NetworkGraph,
    budget: &MemoryBudget,
    mode: QuantMode,
    config: &AllocConfig,
) -> Result<BitPlan> {
    allocate_with_model(graph, budget, mode, config, &MemoryModel::default())
}

pub fn allocate_with_model(
    graph: &NetworkGraph,
    budget: &MemoryBudget,
    mode: QuantMode,
    config: &AllocConfig,
    model: &MemoryModel,
) -> Result<BitPlan> {
    graph.validate()?;
    config.validate()?;
    if budget.m_ro == 0 || budget.m_rw == 0 {
        return Err(Error::Input("memory budgets must be positive".into()));
    }
    let q_act = cut_activation_bits(graph, budget, config)?;
    let q_w = cut_weight_bits(graph, budget, mode, config, &q_act, model)?;
    let plan = BitPlan { q_w, q_act };
    debug_assert!(plan_violations(graph, &plan, budget, mode, model).is_empty());
    Ok(plan)
}

/// Constraint violations of `plan`: the total parameter footprint as a
/// single `read-only` entry and the per-layer activation footprints.
pub fn plan_violations(
    graph: &NetworkGraph,
    plan: &BitPlan,
    budget: &MemoryBudget,
    mode: QuantMode,
    model: &MemoryModel,
) -> Vec<InfeasibleReport> {
    let mut out = Vec::new();
    let footprints = model.layer_footprints(graph, plan, mode);
    let ro: u64 = footprints.iter().map(|f| f.ro_bytes()).sum();
    if ro > budget.m_ro {
        out.push(InfeasibleReport {
            constraint: "read-only",
            budget: budget.m_ro,
            violations: vec![(graph.layers.len(), ro)],
        });
    }
    let rw: Vec<(usize, u64)> = footprints
        .iter()
        .enumerate()
        .map(|(i, f)| (i, f.rw_bytes()))
        .filter(|&(_, b)| b > budget.m_rw)
        .collect();
    if !rw.is_empty() {
        out.push(InfeasibleReport {
            constraint: "read-write",
            budget: budget.m_rw,
            violations: rw,
        });
    }
    out
}
