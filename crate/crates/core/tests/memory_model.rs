use icnq::graph::{LayerKind, LayerSpec};
use icnq::memory::{
    full_precision_bytes, mem, memory_report, reference_threshold_calibration, rw_footprint_per_layer, MemoryModel, MIB,
};
use icnq::mobilenet::{mobilenet_v1, WeightInit};
use icnq::{BitPlan, QuantMode};

const MODES: [QuantMode; 4] = [QuantMode::PlFb, QuantMode::PlIcn, QuantMode::PcIcn, QuantMode::PcThresholds];

fn conv(c_out: usize) -> LayerSpec {
    LayerSpec {
        index: 0,
        kind: LayerKind::PointwiseConv2d,
        kernel: (1, 1),
        stride: (1, 1),
        padding: (0, 0),
        in_channels: 8,
        out_channels: c_out,
        weights: vec![0.0; 8 * c_out],
        bias: None,
        bn: None,
        act_range: (0.0, 6.0),
    }
}

#[test]
fn mem_examples() {
    assert_eq!(mem(1000, 4), 500);
    assert_eq!(mem(1, 2), 1);
    assert_eq!(mem(3_228_864, 8), 3_228_864);
    assert_eq!(mem(5, 4), 3);
    assert_eq!(mem(0, 8), 0);
}

#[test]
fn aux_examples() {
    let m = MemoryModel::default();
    assert_eq!(m.aux_bytes(&conv(1), QuantMode::PlFb, 8, false), 12);
    assert_eq!(m.aux_bytes(&conv(64), QuantMode::PcIcn, 8, false), 706);
    assert_eq!(m.aux_bytes(&conv(64), QuantMode::PlIcn, 8, false), 1 + 1 + 4 * 64 + 4 * 64 + 64 + 1);
    let t = m.aux_bytes(&conv(64), QuantMode::PcThresholds, 4, false);
    assert_eq!(t, 1 + 128 + 1 + 64 * 16 * m.threshold_bytes);
}

#[test]
fn mode_ordering_at_fixed_width() {
    let m = MemoryModel::default();
    for c in [2, 16, 64, 1024] {
        for q in [4u8, 8] {
            let a: Vec<u64> = MODES.iter().map(|&mode| m.aux_bytes(&conv(c), mode, q, false)).collect();
            assert!(a.windows(2).all(|w| w[0] < w[1]), "c={c} q={q}: {a:?}");
        }
    }
}

#[test]
fn cutting_any_tensor_shrinks_the_footprint() {
    let g = mobilenet_v1(128, 0.5, WeightInit::Zeros);
    let l = g.layers.len();
    let m = MemoryModel::default();
    let base = BitPlan::uniform(l, 8);
    for mode in MODES {
        let ro = m.ro_footprint(&g, &base, mode);
        for i in (0..l).filter(|&i| g.layers[i].kind.has_weights()) {
            let mut p = base.clone();
            p.q_w[i] = 4;
            assert!(m.ro_footprint(&g, &p, mode) < ro);
        }
    }
    let rw = rw_footprint_per_layer(&g, &base);
    for j in 1..=l {
        if g.layers[j - 1].kind == LayerKind::AvgPool {
            continue;
        }
        let mut p = base.clone();
        p.q_act[j] = 4;
        let after = rw_footprint_per_layer(&g, &p);
        assert!(after[j - 1] < rw[j - 1]);
        assert!(after.iter().zip(&rw).all(|(a, b)| a <= b));
        // thresholds memory shrinks by 2^4 per channel when q_y drops 8 -> 4
        let layer = &g.layers[j - 1];
        let t8 = m.aux_bytes(layer, QuantMode::PcThresholds, 8, false);
        let t4 = m.aux_bytes(layer, QuantMode::PcThresholds, 4, false);
        let c = layer.out_channels as u64;
        assert_eq!(t8 - t4, c * (256 - 16) * m.threshold_bytes);
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    ((value - target) / target).abs() <= tol
}

#[test]
fn mobilenet_224_footprints() {
    let g = mobilenet_v1(224, 1.0, WeightInit::Zeros);
    let l = g.layers.len();
    let m = MemoryModel::default();
    let mib = |b: u64| b as f64 / MIB as f64;
    let fp = mib(full_precision_bytes(&g));
    assert!(within(fp, 16.27, 0.01), "{fp}");
    let cases = [
        (QuantMode::PlFb, 8, 4.06, 0.02),
        (QuantMode::PlFb, 4, 2.05, 0.02),
        (QuantMode::PlIcn, 4, 2.10, 0.02),
        (QuantMode::PcIcn, 4, 2.12, 0.02),
        (QuantMode::PcThresholds, 4, 2.35, 0.03),
    ];
    for (mode, q, target, tol) in cases {
        let got = mib(m.ro_footprint(&g, &BitPlan::uniform(l, q), mode));
        assert!(within(got, target, tol), "{mode:?} Q{q}: {got:.4} MiB vs {target}");
    }
}

#[test]
fn threshold_calibration_is_recorded() {
    let c = reference_threshold_calibration();
    assert_eq!(c.threshold_bytes, MemoryModel::default().threshold_bytes);
    assert!(c.delta.abs() <= 0.03, "{c:?}");
}

#[test]
fn report_totals_match_the_model() {
    let g = mobilenet_v1(160, 0.75, WeightInit::Zeros);
    let plan = BitPlan::with_bits(g.layers.len(), 4, 8);
    let m = MemoryModel::default();
    let r = memory_report(&g, &plan, QuantMode::PcIcn, &m);
    assert_eq!(r.ro_bytes, m.ro_footprint(&g, &plan, QuantMode::PcIcn));
    assert_eq!(r.rw_peak_bytes, *rw_footprint_per_layer(&g, &plan).iter().max().unwrap());
    assert_eq!(r.layers.len(), g.layers.len());
    let json = serde_json::to_value(&r).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["layers"][0]["weight_bytes"], 3 * 3 * 3 * 24 / 2);
}
