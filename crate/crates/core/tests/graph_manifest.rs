use icnq::graph::{BatchNorm, LayerKind, LayerSpec, NetworkGraph, TensorShape};
use icnq::manifest::{load_graph, parse_graph, save_graph, to_manifest_string, ParamStorage};
use icnq::mobilenet::{mobilenet_v1, WeightInit};
use icnq::synth::{random_chain, ChainLimits};
use icnq::Error;
use proptest::prelude::*;

const MINIMAL: &str = r#"{
  "schema_version": 1,
  "input_shape": {"n": 1, "h": 2, "w": 2, "c": 1},
  "input_range": [0.0, 1.0],
  "layers": [
    {"kind": "pointwise_conv2d", "in_channels": 1, "out_channels": 1,
     "weights": [0.5], "act_range": [0.0, 1.0]}
  ]
}"#;

#[test]
fn minimal_manifest_has_one_layer() {
    let g = parse_graph(MINIMAL, ".").unwrap();
    assert_eq!(g.layers.len(), 1);
    assert_eq!(g.layers[0].kernel, (1, 1));
    assert_eq!(g.infer_shapes().unwrap()[0].output, TensorShape::new(2, 2, 1));
}

#[test]
fn mobilenet_224_matches_the_published_architecture() {
    let g = mobilenet_v1(224, 1.0, WeightInit::Zeros);
    // 27 conv layers, one global pool, one classifier
    assert_eq!(g.layers.len(), 29);
    let weighted = g.layers.iter().filter(|l| l.kind.has_weights()).count();
    assert_eq!(weighted, 28);
    let dw = g.layers.iter().filter(|l| l.kind == LayerKind::DepthwiseConv2d).count();
    assert_eq!(dw, 13);

    let weights: usize = g.layers.iter().map(|l| l.weight_count()).sum();
    assert_eq!(weights, 4_209_088);
    let classifier = g.layers.last().unwrap();
    assert_eq!(classifier.weight_count(), 1024 * 1000);
    let params = g.parameter_count();
    assert!((4.1e6..4.3e6).contains(&(params as f64)), "{params} parameters");

    let shapes = g.boundary_shapes().unwrap();
    assert_eq!(shapes[1], TensorShape::new(112, 112, 32));
    assert_eq!(shapes[27], TensorShape::new(7, 7, 1024));
    assert_eq!(shapes[28], TensorShape::new(1, 1, 1024));
    assert_eq!(shapes[29], TensorShape::new(1, 1, 1000));
}

#[test]
fn zero_sigma_names_layer_and_channel() {
    let mut g = mobilenet_v1(128, 0.25, WeightInit::Zeros);
    g.layers[2].bn.as_mut().unwrap().sigma[3] = 0.0;
    let text = to_manifest_string(&g);
    let err = parse_graph(&text, ".").unwrap_err();
    match &err {
        Error::Invariant { layer, msg } => {
            assert_eq!(*layer, 2);
            assert!(msg.contains("sigma[3]"), "{msg}");
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.to_string().contains("layer 2"));
}

#[test]
fn malformed_and_mismatched_manifests() {
    assert!(matches!(parse_graph("{", "."), Err(Error::Parse(_))));
    let short = MINIMAL.replace("[0.5]", "[0.5, 0.25]");
    assert!(matches!(parse_graph(&short, "."), Err(Error::Shape { layer: 0, .. })));
    let missing_blob = MINIMAL.replace(
        "[0.5]",
        r#"{"blob": "nope.bin", "offset": 0, "count": 1}"#,
    );
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(parse_graph(&missing_blob, dir.path()), Err(Error::Io { .. })));
}

fn conv(kernel: usize, stride: usize, padding: usize, cin: usize, cout: usize) -> LayerSpec {
    LayerSpec {
        index: 0,
        kind: LayerKind::Conv2d,
        kernel: (kernel, kernel),
        stride: (stride, stride),
        padding: (padding, padding),
        in_channels: cin,
        out_channels: cout,
        weights: vec![0.0; kernel * kernel * cin * cout],
        bias: None,
        bn: None,
        act_range: (0.0, 1.0),
    }
}

#[test]
fn infer_shapes_examples() {
    let first = conv(3, 2, 1, 3, 32);
    assert_eq!(
        first.output_shape(TensorShape::new(224, 224, 3)).unwrap(),
        TensorShape::new(112, 112, 32)
    );
    let pool = LayerSpec {
        kind: LayerKind::AvgPool,
        kernel: (7, 7),
        weights: Vec::new(),
        ..conv(1, 1, 0, 1024, 1024)
    };
    assert_eq!(
        pool.output_shape(TensorShape::new(7, 7, 1024)).unwrap(),
        TensorShape::new(1, 1, 1024)
    );
    assert_eq!(
        conv(3, 1, 0, 1, 5).output_shape(TensorShape::new(5, 5, 1)).unwrap(),
        TensorShape::new(3, 3, 5)
    );
    // kernel larger than the padded input
    assert!(conv(5, 1, 0, 1, 1).output_shape(TensorShape::new(3, 3, 1)).is_err());
}

#[test]
fn chained_shapes_must_agree() {
    let mut a = conv(3, 1, 1, 1, 4);
    a.weights = vec![0.0; 9 * 4];
    let mut b = conv(1, 1, 0, 3, 2);
    b.index = 1;
    let g = NetworkGraph {
        layers: vec![a, b],
        input_shape: TensorShape::new(4, 4, 1),
        input_range: (0.0, 1.0),
    };
    assert!(matches!(g.validate(), Err(Error::Shape { layer: 1, .. })));
}

#[test]
fn act_range_must_start_at_zero() {
    let mut g = parse_graph(MINIMAL, ".").unwrap();
    g.layers[0].act_range = (-1.0, 1.0);
    assert!(g.validate().is_err());
}

#[test]
fn sidecar_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let g = mobilenet_v1(128, 0.25, WeightInit::Random(3));
    let path = dir.path().join("m.json");
    save_graph(&g, &path, ParamStorage::Sidecar).unwrap();
    assert!(dir.path().join("m.bin").exists());
    let back = load_graph(&path).unwrap();
    assert_eq!(back, g);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_random_chains(seed in any::<u64>(), sidecar in any::<bool>()) {
        let g = random_chain(seed, ChainLimits::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.json");
        let storage = if sidecar { ParamStorage::Sidecar } else { ParamStorage::Inline };
        save_graph(&g, &path, storage).unwrap();
        let back = load_graph(&path).unwrap();
        prop_assert_eq!(&back, &g);
        for (a, b) in back.layers.iter().zip(&g.layers) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.weights), bits(&b.weights));
        }
        // shape chaining holds for every generated graph
        let shapes = back.infer_shapes().unwrap();
        for w in shapes.windows(2) {
            prop_assert_eq!(w[0].output, w[1].input);
        }
    }

    #[test]
    fn bn_round_trips_with_extreme_values(v in prop::collection::vec(-1e30f32..1e30, 4)) {
        let mut g = parse_graph(MINIMAL, ".").unwrap();
        g.layers[0].bias = Some(vec![v[0]]);
        g.layers[0].bn = Some(BatchNorm {
            gamma: vec![if v[1] == 0.0 { 1.0 } else { v[1] }],
            beta: vec![v[2]],
            mu: vec![v[3]],
            sigma: vec![f32::MIN_POSITIVE],
        });
        let back = parse_graph(&to_manifest_string(&g), ".").unwrap();
        prop_assert_eq!(back, g);
    }
}
