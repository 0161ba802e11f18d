use std::fs;

use icnq::artifact::{bias_section, load_integer_graph, save_integer_graph, BLOB_FILE, GRAPH_FILE};
use icnq::exec::ExecOptions;
use icnq::icn::{convert_graph, LayerOutput};
use icnq::synth::{random_chain, ChainLimits};
use icnq::verify::{verify, VerifyConfig};
use icnq::{BitPlan, Error, QuantMode};

fn converted(seed: u64, mode: QuantMode, q: u8) -> (icnq::NetworkGraph, BitPlan, icnq::icn::IntegerGraph) {
    let g = random_chain(seed, ChainLimits::default());
    let plan = BitPlan::uniform(g.layers.len(), q);
    let ig = convert_graph(&g, &plan, mode).unwrap();
    (g, plan, ig)
}

#[test]
fn round_trip_all_modes_and_widths() {
    for seed in 0..10 {
        for mode in [QuantMode::PlFb, QuantMode::PlIcn, QuantMode::PcIcn] {
            for q in [2u8, 4, 8] {
                let (_, _, mut ig) = converted(seed, mode, q);
                let dir = tempfile::tempdir().unwrap();
                save_integer_graph(&ig, dir.path()).unwrap();
                let back = load_integer_graph(dir.path()).unwrap();
                for l in &mut ig.layers {
                    l.exact = None;
                }
                assert_eq!(back, ig);
            }
        }
    }
}

#[test]
fn parameters_are_little_endian_in_the_blob() {
    let (_, _, ig) = converted(2, QuantMode::PcIcn, 8);
    let dir = tempfile::tempdir().unwrap();
    save_integer_graph(&ig, dir.path()).unwrap();
    let blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
    let section = bias_section(dir.path(), 0).unwrap().unwrap();
    let bq = match &ig.layers[0].output {
        LayerOutput::Icn(p) => p.bq.clone(),
        LayerOutput::Folded { bq, .. } | LayerOutput::Logits { bq, .. } => bq.clone(),
        LayerOutput::AvgPool { .. } => unreachable!(),
    };
    assert_eq!(section.count, bq.len());
    for (i, b) in bq.iter().enumerate() {
        let at = section.offset + 4 * i;
        assert_eq!(&blob[at..at + 4], &b.to_le_bytes());
    }
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(GRAPH_FILE)).unwrap()).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert!(doc["layers"][0]["output"]["n0"]["offset"].is_u64());
}

#[test]
fn truncated_or_denormalized_graphs_are_rejected() {
    let (_, _, ig) = converted(3, QuantMode::PcIcn, 4);
    let dir = tempfile::tempdir().unwrap();
    save_integer_graph(&ig, dir.path()).unwrap();
    let blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
    fs::write(dir.path().join(BLOB_FILE), &blob[..blob.len() - 1]).unwrap();
    assert!(matches!(load_integer_graph(dir.path()), Err(Error::Parse(_))));

    // a mantissa below one half is not a valid multiplier
    let mut bad = blob.clone();
    let text = fs::read_to_string(dir.path().join(GRAPH_FILE)).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let at = doc["layers"][0]["output"]["m0"]["offset"].as_u64().unwrap() as usize;
    bad[at..at + 4].copy_from_slice(&1i32.to_le_bytes());
    fs::write(dir.path().join(BLOB_FILE), &bad).unwrap();
    assert!(matches!(load_integer_graph(dir.path()), Err(Error::Invariant { .. })));
}

#[test]
fn corrupted_bias_fails_verification() {
    let (g, plan, ig) = converted(6, QuantMode::PcIcn, 8);
    let dir = tempfile::tempdir().unwrap();
    save_integer_graph(&ig, dir.path()).unwrap();
    let config = VerifyConfig::default();
    let clean = verify(&g, &plan, &load_integer_graph(dir.path()).unwrap(), &config, ExecOptions::default()).unwrap();
    assert!(clean.passed);

    let section = bias_section(dir.path(), 0).unwrap().unwrap();
    let mut blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
    for i in 0..section.count {
        let at = section.offset + 4 * i;
        let v = i32::from_le_bytes(blob[at..at + 4].try_into().unwrap());
        blob[at..at + 4].copy_from_slice(&v.wrapping_add(1 << 20).to_le_bytes());
    }
    fs::write(dir.path().join(BLOB_FILE), &blob).unwrap();
    let broken = load_integer_graph(dir.path()).unwrap();
    let report = verify(&g, &plan, &broken, &config, ExecOptions::default()).unwrap();
    assert!(!report.passed);
    assert!(report.layers[0].max_deviation > 1.0);
}
