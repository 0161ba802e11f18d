use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icnq::artifact::{bias_section, BLOB_FILE};
use icnq::exec::{quantize_input, run_integer, Activation};
use icnq::icn::convert_graph;
use icnq::manifest::{save_graph, ParamStorage};
use icnq::synth::{random_chain, ChainLimits};
use icnq::{BitPlan, QuantMode};
use serde_json::Value;
use tempfile::TempDir;

fn icnq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icnq")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small chain whose integer graph matches the reference within one code.
fn small_model(dir: &TempDir) -> PathBuf {
    let file = dir.path().join("chain.json");
    save_graph(&random_chain(6, ChainLimits::default()), &file, ParamStorage::Sidecar).unwrap();
    file
}

fn mobilenet(dir: &TempDir, resolution: &str, width: &str) -> PathBuf {
    let file = dir.path().join(format!("mobilenet_{resolution}_{width}.json"));
    let out = icnq(&["gen-mobilenet", "--resolution", resolution, "--width", width, "--out", path(&file)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    file
}

#[test]
fn allocate_writes_a_plan() {
    let dir = TempDir::new().unwrap();
    let model = mobilenet(&dir, "192", "0.5");
    let plan = dir.path().join("plan.json");
    let out = icnq(&[
        "allocate", "--model", path(&model), "--m-ro", "2M", "--m-rw", "512k", "--out", path(&plan), "--json",
    ]);
    let report = stdout_json(&out);
    assert_eq!(report["schema_version"], 1);
    let written: Value = serde_json::from_str(&fs::read_to_string(&plan).unwrap()).unwrap();
    assert_eq!(written["schema_version"], 1);
    assert_eq!(written["q_act"].as_array().unwrap().len(), 30);
    assert_eq!(written["q_act"][0], 8);
    assert!(report["ro_bytes"].as_u64().unwrap() <= 2 * 1024 * 1024);
    assert!(report["rw_peak_bytes"].as_u64().unwrap() <= 512 * 1024);

    // the written plan drives report
    let out = icnq(&["report", "--model", path(&model), "--plan", path(&plan), "--json"]);
    assert_eq!(stdout_json(&out)["report"]["ro_bytes"], report["ro_bytes"]);
}

#[test]
fn infeasible_budget_exits_three() {
    let dir = TempDir::new().unwrap();
    let model = mobilenet(&dir, "128", "0.25");
    let out = icnq(&["allocate", "--model", path(&model), "--m-ro", "1", "--m-rw", "1"]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("read-write"), "{stderr}");
}

#[test]
fn bad_input_exits_two() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = icnq(&["allocate", "--model", path(&bad), "--m-ro", "2M", "--m-rw", "512k"]);
    assert_eq!(out.status.code(), Some(2));
    let out = icnq(&["report", "--model", path(&bad), "--bits", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_matches_the_reference_footprint() {
    let dir = TempDir::new().unwrap();
    let model = mobilenet(&dir, "224", "1.0");
    let out = icnq(&["report", "--model", path(&model), "--mode", "pc-icn", "--bits", "4", "--json"]);
    let ro = stdout_json(&out)["report"]["ro_bytes"].as_f64().unwrap() / (1024.0 * 1024.0);
    assert!((ro - 2.12).abs() / 2.12 <= 0.02, "{ro}");
    let out = icnq(&["report", "--model", path(&model), "--mode", "pc-thresholds", "--bits", "4"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("threshold width 2 bytes"));
}

#[test]
fn convert_then_run_matches_the_library() {
    let dir = TempDir::new().unwrap();
    let model = small_model(&dir);
    let integer = dir.path().join("int");
    let out = icnq(&["convert", "--model", path(&model), "--bits", "8", "--out", path(&integer)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let g = random_chain(6, ChainLimits::default());
    let input: Vec<f32> = (0..g.input_shape.elements()).map(|i| ((i % 7) as f32 - 3.0) / 3.0).collect();
    let raw: Vec<u8> = input.iter().flat_map(|v| v.to_le_bytes()).collect();
    let input_file = dir.path().join("input.bin");
    fs::write(&input_file, raw).unwrap();
    let dumps = dir.path().join("dump");
    let out = icnq(&[
        "run", "--integer", path(&integer), "--input", path(&input_file), "--dump-activations", path(&dumps),
    ]);
    let report = stdout_json(&out);

    let ig = convert_graph(&g, &BitPlan::uniform(g.layers.len(), 8), QuantMode::PcIcn).unwrap();
    let expected = run_integer(&ig, &quantize_input(&ig, &input).unwrap()).unwrap();
    match expected {
        Activation::Codes(t) => {
            assert_eq!(report["output"]["kind"], "codes");
            let codes: Vec<u8> = serde_json::from_value(report["output"]["codes"].clone()).unwrap();
            assert_eq!(codes, t.to_codes());
        }
        Activation::Logits(l) => {
            assert_eq!(report["output"]["kind"], "logits");
            assert_eq!(report["output"]["argmax"], l.argmax());
        }
    }

    let index: Value = serde_json::from_str(&fs::read_to_string(dumps.join("index.json")).unwrap()).unwrap();
    let boundaries = index["boundaries"].as_array().unwrap();
    assert_eq!(boundaries.len(), g.layers.len() + 1);
    for b in boundaries {
        assert!(dumps.join(b["file"].as_str().unwrap()).exists());
    }
}

#[test]
fn verify_is_deterministic_and_passes() {
    let dir = TempDir::new().unwrap();
    let model = small_model(&dir);
    let args = ["verify", "--model", path(&model), "--bits", "8", "--inputs", "4", "--seed", "3"];
    let a = icnq(&args);
    let b = icnq(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout_json(&a)["passed"], true);
}

#[test]
fn corrupted_bias_fails_verify() {
    let dir = TempDir::new().unwrap();
    let model = small_model(&dir);
    let integer = dir.path().join("int");
    assert!(icnq(&["convert", "--model", path(&model), "--bits", "8", "--out", path(&integer)])
        .status
        .success());
    let verify_args = ["verify", "--model", path(&model), "--bits", "8", "--integer", path(&integer)];
    assert!(icnq(&verify_args).status.success());

    let section = bias_section(&integer, 0).unwrap().unwrap();
    let blob_path = integer.join(BLOB_FILE);
    let mut blob = fs::read(&blob_path).unwrap();
    for i in 0..section.count {
        let at = section.offset + 4 * i;
        let v = i32::from_le_bytes(blob[at..at + 4].try_into().unwrap());
        blob[at..at + 4].copy_from_slice(&v.wrapping_add(1 << 20).to_le_bytes());
    }
    fs::write(&blob_path, blob).unwrap();
    assert_eq!(icnq(&verify_args).status.code(), Some(4));
}
