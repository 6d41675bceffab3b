//! Graph IR tests: validation, shape inference, serialization round-trips,
//! batchnorm folding, wide-weight layer selection, and FP execution against
//! an independent f64 evaluator written here.

use qft_core::graph::exec::{argmax_rows, run_fp};
use qft_core::graph::io::{load_graph, save_graph};
use qft_core::graph::{Graph, Layer, LayerKind};
use qft_core::testnets;
use qft_core::{GraphError, Tensor};

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn zoo_nets_validate_with_expected_shapes() {
    for (name, g) in testnets::zoo() {
        let topo = g.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(topo.order.len(), g.layers.len());
        // output of every zoo net is a small dense head
        let out_shape = &topo.shapes[topo.output];
        assert_eq!(out_shape.len(), 1, "{name}");
    }
    let g = testnets::concat_pool_net(7);
    let topo = g.validate().unwrap();
    let cat = g.layer_index("cat").unwrap();
    assert_eq!(topo.shapes[cat], vec![12, 4, 4]);
}

#[test]
fn validation_rejects_malformed_graphs() {
    // duplicate names
    let mut g = testnets::mlp_net(1);
    g.layers[1].name = "fc1".into();
    assert!(matches!(g.validate(), Err(GraphError::DuplicateLayer(_))));

    // dangling edge
    let mut g = testnets::mlp_net(1);
    g.edges.push(("fc3".into(), "nope".into()));
    assert!(matches!(g.validate(), Err(GraphError::DanglingEdge(_))));

    // cycle
    let mut g = testnets::mlp_net(1);
    g.edges.push(("fc3".into(), "fc1".into()));
    assert!(matches!(g.validate(), Err(GraphError::Cycle(_))));

    // two sinks
    let mut g = testnets::mlp_net(1);
    g.layers.push(Layer::bare("extra", LayerKind::Relu));
    g.edges.push(("fc2".into(), "extra".into()));
    assert!(matches!(g.validate(), Err(GraphError::AmbiguousOutput(_))));

    // ew_add with one input
    let g = Graph {
        layers: vec![
            Layer::weighted("fc", LayerKind::Dense, t(&[2, 3], vec![0.1; 6]), None),
            Layer::bare("add", LayerKind::EwAdd),
        ],
        edges: vec![("fc".into(), "add".into())],
        input_shape: vec![3],
        feature_layer: None,
    };
    assert!(matches!(g.validate(), Err(GraphError::BadLayer { .. })));

    // channel mismatch
    let mut g = testnets::conv_small_net(1);
    g.input_shape = vec![3, 8, 8];
    assert!(matches!(g.validate(), Err(GraphError::ShapeMismatch { .. })));

    // unknown feature layer
    let mut g = testnets::mlp_net(1);
    g.feature_layer = Some("missing".into());
    assert!(matches!(g.validate(), Err(GraphError::BadFeatureLayer(_))));
}

#[test]
fn json_round_trip_inline_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    for (name, g) in [("inline", None), ("sidecar", Some("weights.bin"))] {
        let src = testnets::bn_net(42);
        let path = dir.path().join(format!("{name}.json"));
        save_graph(&src, &path, g).unwrap();
        let loaded = load_graph(&path).unwrap();
        assert_eq!(loaded.layers.len(), src.layers.len());
        assert_eq!(loaded.edges, src.edges);
        assert_eq!(loaded.input_shape, src.input_shape);
        for (a, b) in src.layers.iter().zip(&loaded.layers) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kind, b.kind);
            match (&a.weight, &b.weight) {
                (Some(x), Some(y)) => {
                    assert_eq!(x.shape, y.shape);
                    assert_eq!(x.data, y.data, "{name}: weights must round-trip bit-exactly");
                }
                (None, None) => {}
                _ => panic!("weight presence mismatch"),
            }
            match (&a.bn, &b.bn) {
                (Some(x), Some(y)) => assert_eq!(x.gamma.data, y.gamma.data),
                (None, None) => {}
                _ => panic!("bn presence mismatch"),
            }
        }
        loaded.validate().unwrap();
    }
}

#[test]
fn sidecar_out_of_range_offset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    save_graph(&testnets::conv_small_net(3), &path, Some("w.bin")).unwrap();
    // truncate the blob
    let bpath = dir.path().join("w.bin");
    let bytes = std::fs::read(&bpath).unwrap();
    std::fs::write(&bpath, &bytes[..8]).unwrap();
    assert!(matches!(load_graph(&path), Err(GraphError::Sidecar(_))));
}

/// Independent f64 evaluation of conv_small_net's structure, written as
/// straight loops with no shared code. Guards the FP executor end to end.
fn direct_conv_small_eval(g: &Graph, input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let get = |name: &str| g.layers.iter().find(|l| l.name == name).unwrap();
    let conv = |x: &[f64], ci: usize, hi: usize, wi: usize, l: &Layer, stride: usize, pad: usize| -> (Vec<f64>, usize, usize) {
        let wt = l.weight.as_ref().unwrap();
        let b = l.bias.as_ref().unwrap();
        let co = wt.shape[0];
        let k = wt.shape[2];
        let ho = (hi + 2 * pad - k) / stride + 1;
        let wo = (wi + 2 * pad - k) / stride + 1;
        let mut y = vec![0.0f64; co * ho * wo];
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data[oc] as f64;
                    for ic in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= hi as isize || ix >= wi as isize {
                                    continue;
                                }
                                acc += x[(ic * hi + iy as usize) * wi + ix as usize]
                                    * wt.data[((oc * ci + ic) * k + ky) * k + kx] as f64;
                            }
                        }
                    }
                    y[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        (y, ho, wo)
    };
    let (y1, h1, w1) = conv(input, 2, h, w, get("c1"), 1, 1);
    let y1: Vec<f64> = y1.into_iter().map(|v| v.max(0.0)).collect();
    let (y2, h2, w2) = conv(&y1, 6, h1, w1, get("c2"), 2, 1);
    let y2: Vec<f64> = y2.into_iter().map(|v| v.max(0.0)).collect();
    // global average pool over 8 channels
    let mut pooled = vec![0.0f64; 8];
    for c in 0..8 {
        let s: f64 = y2[c * h2 * w2..(c + 1) * h2 * w2].iter().sum();
        pooled[c] = s / (h2 * w2) as f64;
    }
    let head = get("head");
    let wt = head.weight.as_ref().unwrap();
    let b = head.bias.as_ref().unwrap();
    (0..5)
        .map(|o| {
            let mut acc = b.data[o] as f64;
            for i in 0..8 {
                acc += pooled[i] * wt.data[o * 8 + i] as f64;
            }
            acc
        })
        .collect()
}

#[test]
fn fp_executor_matches_independent_f64_evaluation() {
    let g = testnets::conv_small_net(9);
    let topo = g.validate().unwrap();
    let mut r = testnets::rng(77);
    let input = testnets::rand_tensor(&mut r, &[1, 2, 8, 8], -1.0, 1.0);
    let got = run_fp(&g, &topo, &input).unwrap();
    let want = direct_conv_small_eval(&g, &input.data.iter().map(|&v| v as f64).collect::<Vec<_>>(), 8, 8);
    assert_eq!(got.shape, vec![1, 5]);
    for (a, b) in got.data.iter().zip(&want) {
        let err = (*a as f64 - b).abs();
        assert!(err <= 1e-5 * b.abs().max(1.0), "fp {a} vs oracle {b}");
    }
}

#[test]
fn batchnorm_fold_preserves_fp_function() {
    let g = testnets::bn_net(11);
    let folded = g.fold_batchnorm().unwrap();
    assert!(folded.layers.iter().all(|l| l.bn.is_none()));
    let topo = g.validate().unwrap();
    let topo_f = folded.validate().unwrap();
    let mut r = testnets::rng(5);
    for trial in 0..4 {
        let input = testnets::rand_tensor(&mut r, &[3, 2, 8, 8], -1.5, 1.5);
        let a = run_fp(&g, &topo, &input).unwrap();
        let b = run_fp(&folded, &topo_f, &input).unwrap();
        let denom: f32 = a.data.iter().map(|v| v.abs()).fold(0.0, f32::max).max(1e-6);
        for i in 0..a.numel() {
            let rel = (a.data[i] - b.data[i]).abs() / denom;
            assert!(rel <= 1e-5, "trial {trial} coord {i}: {} vs {}", a.data[i], b.data[i]);
        }
        assert_eq!(argmax_rows(&a), argmax_rows(&b), "trial {trial}: decisions must not move");
    }
}

#[test]
fn fold_without_bias_synthesizes_one() {
    let mut g = testnets::bn_net(13);
    for l in &mut g.layers {
        if l.bn.is_some() {
            l.bias = None;
        }
    }
    let folded = g.fold_batchnorm().unwrap();
    for l in &folded.layers {
        if matches!(l.kind, LayerKind::Conv2d { .. }) {
            assert!(l.bias.is_some());
        }
    }
}

#[test]
fn wide_weight_selection_crosses_threshold() {
    // parameter counts 1, 1, 98: only the first smallest layer is needed,
    // because after it the running total already reaches 1% of 100.
    let mk = |name: &str, ci: usize| {
        Layer::weighted(name, LayerKind::Dense, t(&[1, ci], vec![0.1; ci]), None)
    };
    let g = Graph {
        layers: vec![
            mk("a", 1),
            Layer::bare("r1", LayerKind::Relu),
            mk("b", 1),
            Layer::bare("r2", LayerKind::Relu),
            mk("c", 98),
        ],
        edges: chain(&["a", "r1", "b", "r2", "c"]),
        input_shape: vec![1],
        feature_layer: None,
    };
    let sel = g.select_wide_weight_layers(0.01);
    assert_eq!(sel.into_iter().collect::<Vec<_>>(), vec!["a".to_string()]);

    // counts 5, 10, 985: 5 < 10 still below, 5+10 crosses, so {5, 10}.
    let g = Graph {
        layers: vec![
            mk("a", 5),
            Layer::bare("r1", LayerKind::Relu),
            mk("b", 10),
            Layer::bare("r2", LayerKind::Relu),
            mk("c", 985),
        ],
        edges: chain(&["a", "r1", "b", "r2", "c"]),
        input_shape: vec![5],
        feature_layer: None,
    };
    let sel = g.select_wide_weight_layers(0.01);
    assert_eq!(sel.into_iter().collect::<Vec<_>>(), vec!["a".to_string(), "b".to_string()]);
}

fn chain(names: &[&str]) -> Vec<(String, String)> {
    names.windows(2).map(|w| (w[0].to_string(), w[1].to_string())).collect()
}

#[test]
fn scramble_preserves_fp_function() {
    let g = testnets::desk_cnn(21);
    let topo = g.validate().unwrap();
    let mut scrambled = g.clone();
    let mut r = testnets::rng(99);
    let g1 = testnets::gauge_factors(&mut r, 24, 6.0);
    let g2 = testnets::gauge_factors(&mut r, 48, 6.0);
    testnets::scramble_interface(&mut scrambled, "conv1", "conv2", &g1);
    testnets::scramble_interface(&mut scrambled, "conv2", "conv3", &g2);
    let topo_s = scrambled.validate().unwrap();
    let input = testnets::rand_tensor(&mut r, &[4, 3, 8, 8], -1.0, 1.0);
    let a = run_fp(&g, &topo, &input).unwrap();
    let b = run_fp(&scrambled, &topo_s, &input).unwrap();
    let denom: f32 = a.data.iter().map(|v| v.abs()).fold(0.0, f32::max);
    for i in 0..a.numel() {
        assert!((a.data[i] - b.data[i]).abs() / denom <= 1e-4, "coord {i}");
    }
    assert_eq!(argmax_rows(&a), argmax_rows(&b));
}

#[test]
fn dense_mismatched_shapes_are_rejected() {
    // dense weight mismatching wide-weight misuse: dense fed rank-3 input
    let g = Graph {
        layers: vec![
            Layer::weighted("c", LayerKind::Conv2d { stride: 1, pad: 1 }, t(&[2, 3, 3, 3], vec![0.1; 54]), None),
            Layer::weighted("fc", LayerKind::Dense, t(&[4, 2], vec![0.1; 8]), None),
        ],
        edges: vec![("c".into(), "fc".into())],
        input_shape: vec![3, 4, 4],
        feature_layer: None,
    };
    assert!(matches!(g.validate(), Err(GraphError::ShapeMismatch { .. })));
}
