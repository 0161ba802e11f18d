//! Exhaustive allocation checker and budget sampling shared by the
//! allocator tests and the acceptance target.

#![allow(dead_code)]

use icnq::alloc::{plan_violations, ActivationChain, AllocConfig};
use icnq::graph::{LayerKind, NetworkGraph};
use icnq::memory::{MemoryBudget, MemoryModel};
use icnq::synth::{random_chain, ChainLimits};
use icnq::{BitPlan, QuantMode};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LADDER: [u8; 3] = [2, 4, 8];

pub fn allowed(min: u8) -> Vec<u8> {
    LADDER.iter().copied().filter(|&q| q >= min).collect()
}

/// Every activation assignment (input fixed at 8, pools tied) with widths
/// of at least `q_a_min`.
pub fn activation_assignments(graph: &NetworkGraph, q_a_min: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![8u8]];
    for layer in &graph.layers {
        let mut next = Vec::new();
        for q in &out {
            if layer.kind == LayerKind::AvgPool {
                let mut q = q.clone();
                q.push(*q.last().unwrap());
                next.push(q);
            } else {
                for b in allowed(q_a_min) {
                    let mut q = q.clone();
                    q.push(b);
                    next.push(q);
                }
            }
        }
        out = next;
    }
    debug_assert!(out.iter().all(|q| q.len() == graph.layers.len() + 1));
    out
}

/// Smallest weight footprint: every weighted layer at `q_w_min`.
pub fn min_weight_plan(graph: &NetworkGraph, q_act: &[u8], q_w_min: u8) -> BitPlan {
    BitPlan {
        q_w: graph
            .layers
            .iter()
            .map(|l| if l.kind.has_weights() { q_w_min } else { 8 })
            .collect(),
        q_act: q_act.to_vec(),
    }
}

/// Outcome of an exhaustive search over all plans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exhaustive {
    pub feasible: bool,
    /// Fewest activation cut steps among plans meeting both constraints.
    pub min_activation_cuts: Option<u32>,
}

fn cut_steps(q: &[u8]) -> u32 {
    q.iter()
        .map(|&b| match b {
            8 => 0,
            4 => 1,
            _ => 2,
        })
        .sum()
}

pub fn exhaustive(graph: &NetworkGraph, budget: &MemoryBudget, mode: QuantMode, config: &AllocConfig) -> Exhaustive {
    let model = MemoryModel::default();
    let chain = ActivationChain::from_graph(graph).unwrap();
    let mut best: Option<u32> = None;
    for q_act in activation_assignments(graph, config.q_a_min) {
        if !chain.violations(&q_act, budget.m_rw).is_empty() {
            continue;
        }
        let plan = min_weight_plan(graph, &q_act, config.q_w_min);
        if model.ro_footprint(graph, &plan, mode) > budget.m_ro {
            continue;
        }
        let cuts = cut_steps(&q_act);
        best = Some(best.map_or(cuts, |b| b.min(cuts)));
    }
    Exhaustive {
        feasible: best.is_some(),
        min_activation_cuts: best,
    }
}

/// True when `plan` respects both budgets and every width bound.
pub fn plan_is_valid(
    graph: &NetworkGraph,
    plan: &BitPlan,
    budget: &MemoryBudget,
    mode: QuantMode,
    config: &AllocConfig,
) -> bool {
    plan.validate(graph).is_ok()
        && plan_violations(graph, plan, budget, mode, &MemoryModel::default()).is_empty()
        && plan.q_act[1..].iter().all(|&q| q >= config.q_a_min)
        && plan
            .q_w
            .iter()
            .zip(&graph.layers)
            .all(|(&q, l)| !l.kind.has_weights() || q >= config.q_w_min)
}

pub fn alloc_limits() -> ChainLimits {
    ChainLimits {
        min_layers: 3,
        max_layers: 6,
        max_spatial: 16,
        max_channels: 16,
        classifier: true,
    }
}

pub fn synthetic_graph(seed: u64) -> NetworkGraph {
    random_chain(seed, alloc_limits())
}

/// Budget that exactly fits a randomly drawn plan, so it is feasible but
/// leaves no slack.
pub fn tight_budget(graph: &NetworkGraph, mode: QuantMode, config: &AllocConfig, seed: u64) -> (MemoryBudget, BitPlan) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acts = activation_assignments(graph, config.q_a_min);
    let q_act = acts.choose(&mut rng).unwrap().clone();
    let q_w = graph
        .layers
        .iter()
        .map(|l| {
            if l.kind.has_weights() {
                *allowed(config.q_w_min).choose(&mut rng).unwrap()
            } else {
                8
            }
        })
        .collect();
    let plan = BitPlan { q_w, q_act };
    let model = MemoryModel::default();
    let footprints = model.layer_footprints(graph, &plan, mode);
    let m_ro = footprints.iter().map(|f| f.ro_bytes()).sum();
    let m_rw = footprints.iter().map(|f| f.rw_bytes()).max().unwrap();
    (MemoryBudget::new(m_ro, m_rw), plan)
}

/// Budget strictly below the smallest possible footprint on one side.
pub fn infeasible_budget(graph: &NetworkGraph, mode: QuantMode, config: &AllocConfig, seed: u64) -> MemoryBudget {
    let (tight, _) = tight_budget(graph, mode, config, seed);
    let model = MemoryModel::default();
    let chain = ActivationChain::from_graph(graph).unwrap();
    let min_rw = activation_assignments(graph, config.q_a_min)
        .iter()
        .map(|q| (0..chain.layers()).map(|i| chain.layer_bytes(q, i)).max().unwrap())
        .min()
        .unwrap();
    let min_ro = activation_assignments(graph, config.q_a_min)
        .iter()
        .map(|q| model.ro_footprint(graph, &min_weight_plan(graph, q, config.q_w_min), mode))
        .min()
        .unwrap();
    if seed % 2 == 0 {
        MemoryBudget::new(tight.m_ro.max(min_ro), min_rw - 1)
    } else {
        MemoryBudget::new(min_ro - 1, tight.m_rw.max(min_rw))
    }
}
