//! Equivalence check between the integer graph and the fake-quantized oracle.
//!
//! Each layer is checked teacher-forced: the oracle layer receives the same
//! input codes as the integer layer, so the reported deviation is the error
//! introduced by that layer alone. End-to-end figures, where small per-layer
//! differences may compound, are reported for information.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{argmax_by, quantize_input, run_integer_trace, Activation, ExecOptions, Logits};
use crate::graph::NetworkGraph;
use crate::icn::{convert_graph, IntegerGraph};
use crate::mode::QuantMode;
use crate::oracle::{FakeQuantGraph, OracleValue};
use crate::plan::BitPlan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub inputs: usize,
    pub seed: u64,
    /// Largest accepted per-element deviation, in codes.
    pub tolerance_codes: u32,
    /// Top-1 margin, in logit scale units, above which argmax must agree.
    pub argmax_margin: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            inputs: 8,
            seed: 0,
            tolerance_codes: 1,
            argmax_margin: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDeviation {
    pub layer: usize,
    pub kind: &'static str,
    /// Max |integer - oracle| over all inputs: codes for activations, logit
    /// scale units for the classifier.
    pub max_deviation: f64,
    /// Elements whose deviation is above zero.
    pub mismatched: usize,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub mode: QuantMode,
    pub seed: u64,
    pub inputs: usize,
    pub tolerance_codes: u32,
    pub layers: Vec<LayerDeviation>,
    pub max_deviation: f64,
    /// Inputs whose oracle top-1 margin exceeded the threshold.
    pub argmax_checked: usize,
    pub argmax_agreed: usize,
    /// Max code deviation when both sides run end to end from the same input.
    pub end_to_end_max_deviation: f64,
    pub end_to_end_argmax_agreed: usize,
    pub passed: bool,
}

impl VerifyReport {
    pub fn argmax_agreement(&self) -> f64 {
        if self.argmax_checked == 0 {
            1.0
        } else {
            self.argmax_agreed as f64 / self.argmax_checked as f64
        }
    }
}

#[derive(Default)]
struct InputResult {
    per_layer: Vec<(f64, usize, usize)>,
    argmax_checked: bool,
    argmax_agreed: bool,
    e2e_dev: f64,
    e2e_agreed: bool,
}

fn code_deviation(a: &[u8], b: &[u8]) -> (f64, usize) {
    let mut max = 0u32;
    let mut mismatched = 0;
    for (&x, &y) in a.iter().zip(b) {
        let d = (x as i32 - y as i32).unsigned_abs();
        max = max.max(d);
        mismatched += (d > 0) as usize;
    }
    (max as f64, mismatched)
}

fn logit_deviation(int: &Logits, oracle: &[f64]) -> (f64, usize) {
    let values = int.values();
    let mut max = 0.0f64;
    let mut mismatched = 0;
    for ((v, o), s) in values.iter().zip(oracle).zip(&int.scale) {
        let d = (v - o).abs() / s.abs().max(f64::MIN_POSITIVE);
        max = max.max(d);
        mismatched += (d > 0.0) as usize;
    }
    (max, mismatched)
}

/// Gap between the largest and second-largest value.
fn top1_margin(v: &[f64]) -> f64 {
    let best = argmax_by(v, |a, b| a > b);
    v.iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &x)| v[best] - x)
        .fold(f64::INFINITY, f64::min)
}

fn random_input(graph: &NetworkGraph, seed: u64, index: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (lo, hi) = graph.input_range;
    let n = graph.input_shape.elements();
    if hi > lo {
        (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
    } else {
        vec![lo; n]
    }
}

fn check_input(
    oracle: &FakeQuantGraph,
    integer: &IntegerGraph,
    input: &[f32],
    opts: ExecOptions,
    margin: f64,
) -> Result<InputResult> {
    let x = quantize_input(integer, input)?;
    let trace = run_integer_trace(integer, &x, opts)?;
    let mut out = InputResult::default();
    let mut codes = x.to_codes();
    for (i, act) in trace.iter().enumerate() {
        let expected = oracle.forward_layer(i, &codes);
        let entry = match (act, &expected) {
            (Activation::Codes(t), OracleValue::Codes(o)) => {
                let c = t.to_codes();
                let (d, m) = code_deviation(&c, o);
                codes = c;
                (d, m, o.len())
            }
            (Activation::Logits(l), OracleValue::Real(o)) => {
                let (d, m) = logit_deviation(l, o);
                let unit = l.scale.iter().fold(0.0f64, |a, s| a.max(s.abs()));
                if top1_margin(o) > margin * unit {
                    out.argmax_checked = true;
                    out.argmax_agreed = l.argmax() == argmax_by(o, |a, b| a > b);
                }
                (d, m, o.len())
            }
            _ => {
                return Err(Error::Graph(format!(
                    "layer {i}: integer graph and oracle disagree on the output kind"
                )))
            }
        };
        out.per_layer.push(entry);
    }
    // end to end from the same float input
    let e2e = oracle.run_trace(input);
    for (act, expected) in trace.iter().zip(&e2e) {
        match (act, expected) {
            (Activation::Codes(t), OracleValue::Codes(o)) => {
                out.e2e_dev = out.e2e_dev.max(code_deviation(&t.to_codes(), o).0);
            }
            (Activation::Logits(l), OracleValue::Real(o)) => {
                out.e2e_agreed = l.argmax() == argmax_by(o, |a, b| a > b);
            }
            _ => {}
        }
    }
    if !matches!(trace.last(), Some(Activation::Logits(_))) {
        out.e2e_agreed = true;
    }
    Ok(out)
}

/// Compares `integer` against the oracle built from `graph` and `plan` on
/// `config.inputs` seeded random inputs.
pub fn verify(
    graph: &NetworkGraph,
    plan: &BitPlan,
    integer: &IntegerGraph,
    config: &VerifyConfig,
    opts: ExecOptions,
) -> Result<VerifyReport> {
    integer.validate()?;
    let oracle = FakeQuantGraph::new(graph, plan, integer.mode)?;
    if oracle.layer_count() != integer.layers.len() {
        return Err(Error::Graph(format!(
            "integer graph has {} layers, float graph {}",
            integer.layers.len(),
            oracle.layer_count()
        )));
    }
    let results = (0..config.inputs)
        .into_par_iter()
        .map(|k| {
            let input = random_input(graph, config.seed, k);
            check_input(&oracle, integer, &input, opts, config.argmax_margin)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut layers: Vec<LayerDeviation> = integer
        .layers
        .iter()
        .map(|l| LayerDeviation {
            layer: l.index,
            kind: l.kind.name(),
            max_deviation: 0.0,
            mismatched: 0,
            elements: 0,
        })
        .collect();
    let mut report = VerifyReport {
        schema_version: crate::SCHEMA_VERSION,
        mode: integer.mode,
        seed: config.seed,
        inputs: config.inputs,
        tolerance_codes: config.tolerance_codes,
        layers: Vec::new(),
        max_deviation: 0.0,
        argmax_checked: 0,
        argmax_agreed: 0,
        end_to_end_max_deviation: 0.0,
        end_to_end_argmax_agreed: 0,
        passed: false,
    };
    for r in &results {
        for (entry, &(d, m, n)) in layers.iter_mut().zip(&r.per_layer) {
            entry.max_deviation = entry.max_deviation.max(d);
            entry.mismatched += m;
            entry.elements += n;
        }
        report.argmax_checked += r.argmax_checked as usize;
        report.argmax_agreed += (r.argmax_checked && r.argmax_agreed) as usize;
        report.end_to_end_max_deviation = report.end_to_end_max_deviation.max(r.e2e_dev);
        report.end_to_end_argmax_agreed += r.e2e_agreed as usize;
    }
    report.max_deviation = layers.iter().map(|l| l.max_deviation).fold(0.0, f64::max);
    report.layers = layers;
    report.passed = report.max_deviation <= config.tolerance_codes as f64
        && report.argmax_agreed == report.argmax_checked;
    Ok(report)
}

/// Converts `graph` under `plan` and `mode`, then verifies the result.
pub fn verify_conversion(
    graph: &NetworkGraph,
    plan: &BitPlan,
    mode: QuantMode,
    config: &VerifyConfig,
    opts: ExecOptions,
) -> Result<VerifyReport> {
    let integer = convert_graph(graph, plan, mode)?;
    verify(graph, plan, &integer, config, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_of_values() {
        assert_eq!(top1_margin(&[1.0, 4.0, 3.5]), 0.5);
        assert_eq!(top1_margin(&[2.0, 2.0]), 0.0);
    }

    #[test]
    fn random_inputs_are_reproducible_and_in_range() {
        let g = crate::mobilenet::mobilenet_v1(128, 0.25, crate::mobilenet::WeightInit::Zeros);
        let a = random_input(&g, 7, 3);
        assert_eq!(a, random_input(&g, 7, 3));
        assert_ne!(a, random_input(&g, 7, 4));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
