//! Seeded network builders for tests, compiled only with the `testing`
//! feature. The zoo covers every supported layer kind so structural code
//! paths (depthwise, elementwise add, concat, pooling, relu6, batchnorm)
//! all get exercised by the equivalence and conformance suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{BatchNorm, Graph, Layer, LayerKind};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Weight with fan-in scaled range and a random per-output-channel gauge in
/// [0.5, 2] so cross-layer ranges are alive.
fn gauged_weight(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = 1.0 / (fan_in as f32).sqrt();
    let mut t = rand_tensor(r, shape, -bound, bound);
    let oc = shape[0];
    let per = t.numel() / oc;
    for c in 0..oc {
        let gauge = r.gen_range(0.5f32..2.0);
        for k in 0..per {
            t.data[c * per + k] *= gauge;
        }
    }
    t
}

fn bias(r: &mut ChaCha8Rng, oc: usize, scale: f32) -> Tensor {
    rand_tensor(r, &[oc], -scale, scale)
}

fn conv(name: &str, r: &mut ChaCha8Rng, ci: usize, co: usize, k: usize, stride: usize, pad: usize) -> Layer {
    let w = gauged_weight(r, &[co, ci, k, k]);
    Layer::weighted(name, LayerKind::Conv2d { stride, pad }, w, Some(bias(r, co, 0.05)))
}

fn dense(name: &str, r: &mut ChaCha8Rng, ci: usize, co: usize) -> Layer {
    let w = gauged_weight(r, &[co, ci]);
    Layer::weighted(name, LayerKind::Dense, w, Some(bias(r, co, 0.05)))
}

fn chain_edges(names: &[&str]) -> Vec<(String, String)> {
    names.windows(2).map(|w| (w[0].to_string(), w[1].to_string())).collect()
}

/// dense -> relu -> dense -> relu -> dense
pub fn mlp_net(seed: u64) -> Graph {
    let mut r = rng(seed);
    Graph {
        layers: vec![
            dense("fc1", &mut r, 6, 12),
            Layer::bare("act1", LayerKind::Relu),
            dense("fc2", &mut r, 12, 8),
            Layer::bare("act2", LayerKind::Relu),
            dense("fc3", &mut r, 8, 4),
        ],
        edges: chain_edges(&["fc1", "act1", "fc2", "act2", "fc3"]),
        input_shape: vec![6],
        feature_layer: None,
    }
}

/// conv -> relu -> strided conv -> relu -> gap -> dense
pub fn conv_small_net(seed: u64) -> Graph {
    let mut r = rng(seed);
    Graph {
        layers: vec![
            conv("c1", &mut r, 2, 6, 3, 1, 1),
            Layer::bare("a1", LayerKind::Relu),
            conv("c2", &mut r, 6, 8, 3, 2, 1),
            Layer::bare("a2", LayerKind::Relu),
            Layer::bare("gap", LayerKind::AvgPoolGlobal),
            dense("head", &mut r, 8, 5),
        ],
        edges: chain_edges(&["c1", "a1", "c2", "a2", "gap", "head"]),
        input_shape: vec![2, 8, 8],
        feature_layer: None,
    }
}

/// conv -> relu -> depthwise -> relu -> 1x1 conv -> relu -> gap -> dense
pub fn depthwise_net(seed: u64) -> Graph {
    let mut r = rng(seed);
    let dw = Layer::weighted(
        "dw",
        LayerKind::DepthwiseConv2d { stride: 1, pad: 1 },
        gauged_weight(&mut r, &[8, 3, 3]),
        Some(bias(&mut r, 8, 0.05)),
    );
    Graph {
        layers: vec![
            conv("c1", &mut r, 3, 8, 3, 1, 1),
            Layer::bare("a1", LayerKind::Relu),
            dw,
            Layer::bare("a2", LayerKind::Relu),
            conv("pw", &mut r, 8, 6, 1, 1, 0),
            Layer::bare("a3", LayerKind::Relu),
            Layer::bare("gap", LayerKind::AvgPoolGlobal),
            dense("head", &mut r, 6, 4),
        ],
        edges: chain_edges(&["c1", "a1", "dw", "a2", "pw", "a3", "gap", "head"]),
        input_shape: vec![3, 6, 6],
        feature_layer: None,
    }
}

/// residual block: relu1 and a conv branch from it merge in ew_add
pub fn ewadd_net(seed: u64) -> Graph {
    let mut r = rng(seed);
    Graph {
        layers: vec![
            conv("c1", &mut r, 3, 8, 3, 1, 1),
            Layer::bare("a1", LayerKind::Relu),
            conv("c2", &mut r, 8, 8, 3, 1, 1),
            Layer::bare("a2", LayerKind::Relu),
            Layer::bare("merge", LayerKind::EwAdd),
            Layer::bare("a3", LayerKind::Relu),
            Layer::bare("gap", LayerKind::AvgPoolGlobal),
            dense("head", &mut r, 8, 4),
        ],
        edges: vec![
            ("c1".into(), "a1".into()),
            ("a1".into(), "c2".into()),
            ("c2".into(), "a2".into()),
            ("a1".into(), "merge".into()),
            ("a2".into(), "merge".into()),
            ("merge".into(), "a3".into()),
            ("a3".into(), "gap".into()),
            ("gap".into(), "head".into()),
        ],
        input_shape: vec![3, 6, 6],
        feature_layer: None,
    }
}

/// two branches from the input (relu and relu6), maxpooled, concatenated
pub fn concat_pool_net(seed: u64) -> Graph {
    let mut r = rng(seed);
    Graph {
        layers: vec![
            conv("cb1", &mut r, 3, 6, 3, 1, 1),
            Layer::bare("ab1", LayerKind::Relu),
            Layer::bare("pb1", LayerKind::MaxPool { kernel: 2, stride: 2 }),
            conv("cb2", &mut r, 3, 6, 3, 1, 1),
            Layer::bare("ab2", LayerKind::Relu6),
            Layer::bare("pb2", LayerKind::MaxPool { kernel: 2, stride: 2 }),
            Layer::bare("cat", LayerKind::Concat),
            conv("mix", &mut r, 12, 8, 1, 1, 0),
            Layer::bare("a3", LayerKind::Relu),
            Layer::bare("gap", LayerKind::AvgPoolGlobal),
            dense("head", &mut r, 8, 4),
        ],
        edges: vec![
            ("cb1".into(), "ab1".into()),
            ("ab1".into(), "pb1".into()),
            ("cb2".into(), "ab2".into()),
            ("ab2".into(), "pb2".into()),
            ("pb1".into(), "cat".into()),
            ("pb2".into(), "cat".into()),
            ("cat".into(), "mix".into()),
            ("mix".into(), "a3".into()),
            ("a3".into(), "gap".into()),
            ("gap".into(), "head".into()),
        ],
        input_shape: vec![3, 8, 8],
        feature_layer: None,
    }
}

/// conv layers carrying batchnorm parameters, for fold tests
pub fn bn_net(seed: u64) -> Graph {
    let mut r = rng(seed);
    let mut g = conv_small_net(seed);
    for l in &mut g.layers {
        if matches!(l.kind, LayerKind::Conv2d { .. }) {
            let oc = l.out_channels();
            l.bn = Some(BatchNorm {
                gamma: rand_tensor(&mut r, &[oc], 0.5, 1.5),
                beta: rand_tensor(&mut r, &[oc], -0.3, 0.3),
                mean: rand_tensor(&mut r, &[oc], -0.2, 0.2),
                var: rand_tensor(&mut r, &[oc], 0.2, 1.2),
                eps: 1e-5,
            });
        }
    }
    g
}

/// The five structurally diverse nets used by equivalence and conformance
/// acceptance checks.
pub fn zoo() -> Vec<(&'static str, Graph)> {
    vec![
        ("mlp", mlp_net(101)),
        ("conv_small", conv_small_net(102)),
        ("depthwise", depthwise_net(103)),
        ("ewadd", ewadd_net(104)),
        ("concat_pool", concat_pool_net(105)),
    ]
}

/// Desk-scale CNN for the finetuning efficacy check: 3x8x8 input, three conv
/// stages, global pool, ten-way head. About 46k parameters.
pub fn desk_cnn(seed: u64) -> Graph {
    let mut r = rng(seed);
    Graph {
        layers: vec![
            conv("conv1", &mut r, 3, 24, 3, 1, 1),
            Layer::bare("act1", LayerKind::Relu),
            conv("conv2", &mut r, 24, 48, 3, 2, 1),
            Layer::bare("act2", LayerKind::Relu),
            conv("conv3", &mut r, 48, 80, 3, 1, 1),
            Layer::bare("act3", LayerKind::Relu),
            Layer::bare("gap", LayerKind::AvgPoolGlobal),
            dense("head", &mut r, 80, 10),
        ],
        edges: chain_edges(&["conv1", "act1", "conv2", "act2", "conv3", "act3", "gap", "head"]),
        input_shape: vec![3, 8, 8],
        feature_layer: None,
    }
}

/// Rescale producer output channels by per-channel factors and divide them
/// back out of the consumer's input columns. Relu between them is positively
/// homogeneous, so the network function is preserved exactly in exact
/// arithmetic; in f32 it is preserved to rounding.
pub fn scramble_interface(g: &mut Graph, producer: &str, consumer: &str, gammas: &[f32]) {
    let pi = g.layers.iter().position(|l| l.name == producer).expect("producer exists");
    let ci = g.layers.iter().position(|l| l.name == consumer).expect("consumer exists");
    {
        let l = &mut g.layers[pi];
        let w = l.weight.as_mut().unwrap();
        let oc = w.shape[0];
        assert_eq!(oc, gammas.len());
        let per = w.numel() / oc;
        for c in 0..oc {
            for k in 0..per {
                w.data[c * per + k] *= gammas[c];
            }
        }
        if let Some(b) = l.bias.as_mut() {
            for c in 0..oc {
                b.data[c] *= gammas[c];
            }
        }
    }
    {
        let l = &mut g.layers[ci];
        let w = l.weight.as_mut().unwrap();
        match l.kind {
            LayerKind::Conv2d { .. } => {
                let (oc, icn, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
                assert_eq!(icn, gammas.len());
                for o in 0..oc {
                    for i in 0..icn {
                        for k in 0..kh * kw {
                            w.data[(o * icn + i) * kh * kw + k] /= gammas[i];
                        }
                    }
                }
            }
            LayerKind::Dense => {
                let (oc, icn) = (w.shape[0], w.shape[1]);
                assert_eq!(icn, gammas.len());
                for o in 0..oc {
                    for i in 0..icn {
                        w.data[o * icn + i] /= gammas[i];
                    }
                }
            }
            _ => panic!("scramble consumer must be conv or dense"),
        }
    }
}

/// Log-uniform gauge factors in [1/strength, strength].
pub fn gauge_factors(r: &mut ChaCha8Rng, n: usize, strength: f32) -> Vec<f32> {
    let ls = strength.ln();
    (0..n).map(|_| r.gen_range(-ls..ls).exp()).collect()
}
