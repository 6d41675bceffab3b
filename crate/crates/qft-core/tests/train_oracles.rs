//! Finetuning-loop checks: loss definitions against hand arithmetic and
//! finite differences, the restart schedule's exact spot values, determinism,
//! freeze semantics, and loss descent on the regression nets.

use std::collections::BTreeMap;

use qft_core::dof::{
    build_offline, constraint_audit, init_quantization, record_student, snapshot_string,
    FamilyMask, SCALE_FLOOR,
};
use qft_core::error::TrainError;
use qft_core::graph::{Graph, Layer, LayerKind};
use qft_core::oracle::rel_close;
use qft_core::testnets::{self, gauge_factors, rand_tensor, rng, scramble_interface};
use qft_core::train::{
    kd_loss, lr_at, mixed_loss, train, DataSource, OptimizerState, TrainConfig,
};
use qft_core::{HwConfig, Tape, Tensor, TrainReport};

fn calib_for(g: &Graph, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    let mut shape = vec![4];
    shape.extend_from_slice(&g.input_shape);
    (0..2).map(|_| rand_tensor(&mut r, &shape, -1.0, 1.5)).collect()
}

fn small_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        images_per_epoch: 32,
        batch_size: 8,
        base_lr: 1e-4,
        lambda: 0.0,
        seed,
        families: FamilyMask::all(),
        failure_snapshot: None,
    }
}

#[test]
fn kd_loss_hand_values() {
    let t = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
    let s = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
    assert_eq!(kd_loss(&t, &t), (0.0, false));
    assert_eq!(kd_loss(&t, &s), (1.0, false));

    // zero-energy teacher falls back to the plain mean square
    let z = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
    let s2 = Tensor::from_vec(&[2], vec![3.0, 1.0]).unwrap();
    let (l, fallback) = kd_loss(&z, &s2);
    assert!(fallback);
    assert!((l - 5.0).abs() < 1e-6, "mean of 9 and 1");
}

#[test]
fn mixed_loss_endpoints() {
    assert_eq!(mixed_loss(0.4, 0.9, 0.0), 0.4);
    assert_eq!(mixed_loss(0.4, 0.9, 1.0), 0.9);
    let mid = mixed_loss(0.4, 0.9, 0.5);
    assert!((mid - 0.65).abs() < 1e-7);
}

#[test]
fn kd_gradient_matches_finite_differences() {
    // the same normalized square error, written on a tape against a constant
    // teacher, must differentiate like the closed-form loss
    let mut r = rng(9);
    let teacher = rand_tensor(&mut r, &[4, 6], -1.0, 1.0);
    let student0 = rand_tensor(&mut r, &[4, 6], -1.0, 1.0);
    let energy: f64 = teacher.data.iter().map(|&x| (x as f64) * (x as f64)).sum();

    let mut tape = Tape::new();
    let s = tape.leaf(student0.clone(), true);
    let t = tape.constant(teacher.clone());
    let d = tape.sub(s, t).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let sse = tape.reduce_sum(sq);
    let loss = tape.mul_const(sse, (1.0 / energy) as f32);
    assert!(rel_close(tape.value(loss).data[0] as f64, kd_loss(&teacher, &student0).0 as f64, 1e-6));
    tape.backward(loss).unwrap();

    // closed form in f64 so the difference quotient carries no storage noise
    let kd64 = |delta_at: usize, delta: f64| -> f64 {
        let mut num = 0.0f64;
        for i in 0..teacher.numel() {
            let mut s = student0.data[i] as f64;
            if i == delta_at {
                s += delta;
            }
            let d = (teacher.data[i] as f64) - s;
            num += d * d;
        }
        num / energy
    };
    let h = 1e-5f64;
    for i in 0..teacher.numel() {
        let fd = (kd64(i, h) - kd64(i, -h)) / (2.0 * h);
        let bp = tape.grad(s).data[i] as f64;
        assert!(rel_close(fd, bp, 1e-4), "coord {i}: fd {fd} vs backward {bp}");
    }
}

#[test]
fn lr_schedule_spot_values() {
    let cfg = TrainConfig::default();
    let spe = cfg.steps_per_epoch();
    assert_eq!(spe, 512);
    assert_eq!(lr_at(0, &cfg), 1e-4);
    assert_eq!(lr_at(4 * spe, &cfg), 5e-5);
    assert_eq!(lr_at(8 * spe, &cfg), 2.5e-5);
    // cosine midpoint of the first segment sits at half amplitude
    let mid = lr_at(2 * spe, &cfg);
    assert!(rel_close(mid as f64, 5e-5, 1e-6));
    // monotone within a segment
    assert!(lr_at(1, &cfg) < lr_at(0, &cfg));
    assert!(lr_at(4 * spe - 1, &cfg) < lr_at(3 * spe, &cfg));
}

#[test]
fn adam_moves_toward_a_quadratic_minimum() {
    // sanity of the optimizer itself: minimize (x - 3)^2 coordinate-wise
    let mut opt = OptimizerState::new(1);
    let mut x = vec![0.0f32; 4];
    for _ in 0..4000 {
        opt.advance();
        let g: Vec<f32> = x.iter().map(|&v| 2.0 * (v - 3.0)).collect();
        opt.update(0, 5e-3, &g, &mut x);
    }
    for &v in &x {
        assert!((v - 3.0).abs() < 1e-2, "{v}");
    }
}

#[test]
fn zero_steps_is_an_evaluation() {
    let g = testnets::mlp_net(11);
    let mut dof = init_quantization(&g, &HwConfig::default(), &calib_for(&g, 5)).unwrap();
    let plan = build_offline(&dof, &g, &dof.hw).unwrap();
    let before = snapshot_string(&dof).unwrap();
    let report =
        train(&g, &plan, &mut dof, &DataSource::synthetic(3), &small_cfg(0, 1)).unwrap();
    assert_eq!(report.steps, 0);
    assert_eq!(report.initial_loss, report.final_loss);
    assert!(report.initial_loss.is_finite());
    assert_eq!(snapshot_string(&dof).unwrap(), before);
}

#[test]
fn all_frozen_is_a_no_op_on_dof() {
    let g = testnets::conv_small_net(12);
    let mut dof = init_quantization(&g, &HwConfig::default(), &calib_for(&g, 5)).unwrap();
    let plan = build_offline(&dof, &g, &dof.hw).unwrap();
    let before = snapshot_string(&dof).unwrap();
    let mut cfg = small_cfg(2, 2);
    cfg.families = FamilyMask::none();
    let report = train(&g, &plan, &mut dof, &DataSource::synthetic(3), &cfg).unwrap();
    assert_eq!(report.steps, cfg.total_steps());
    assert_eq!(snapshot_string(&dof).unwrap(), before);
    // same batch, next epoch: nothing moved, so the loss repeats exactly
    let spe = cfg.steps_per_epoch();
    assert_eq!(report.loss_curve[0], report.loss_curve[spe]);
}

#[test]
fn same_seed_same_snapshot() {
    let g = testnets::mlp_net(13);
    let base = init_quantization(&g, &HwConfig::default(), &calib_for(&g, 5)).unwrap();
    let plan = build_offline(&base, &g, &base.hw).unwrap();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut dof = base.clone();
        let report =
            train(&g, &plan, &mut dof, &DataSource::synthetic(7), &small_cfg(2, 42)).unwrap();
        runs.push((snapshot_string(&dof).unwrap(), report.loss_curve.clone()));
    }
    assert_eq!(runs[0].0, runs[1].0, "snapshots must match bit for bit");
    assert_eq!(runs[0].1, runs[1].1, "loss curves must match");
}

#[test]
fn loss_decreases_on_the_regression_nets() {
    for (name, g) in [
        ("mlp", testnets::mlp_net(21)),
        ("conv_small", testnets::conv_small_net(22)),
        ("depthwise", testnets::depthwise_net(23)),
    ] {
        let mut dof = init_quantization(&g, &HwConfig::default(), &calib_for(&g, 5)).unwrap();
        let plan = build_offline(&dof, &g, &dof.hw).unwrap();
        let report =
            train(&g, &plan, &mut dof, &DataSource::synthetic(5), &small_cfg(8, 3)).unwrap();
        assert!(
            report.final_loss < report.initial_loss,
            "{name}: {} -> {}",
            report.initial_loss,
            report.final_loss
        );
        // the audit still holds after every update
        constraint_audit(&g, &plan, &dof).unwrap();
        for gr in &dof.groups {
            assert!(gr.s_a.data.iter().all(|&s| s >= SCALE_FLOOR));
        }
        for l in &dof.layers {
            assert!(l.f_hat.data.iter().all(|&f| f >= SCALE_FLOOR));
        }
    }
}

#[test]
fn joint_training_beats_frozen_scales() {
    // heterogeneous rows make the shared rescale a poor fit, so the scale
    // family must earn its keep
    let mut g = testnets::mlp_net(31);
    let mut r = rng(32);
    let gam = gauge_factors(&mut r, 12, 8.0);
    scramble_interface(&mut g, "fc1", "fc2", &gam);
    let base = init_quantization(&g, &HwConfig::default(), &calib_for(&g, 5)).unwrap();
    let plan = build_offline(&base, &g, &base.hw).unwrap();

    let run = |families: FamilyMask| {
        let mut dof = base.clone();
        let mut cfg = small_cfg(10, 4);
        cfg.families = families;
        train(&g, &plan, &mut dof, &DataSource::synthetic(9), &cfg).unwrap().final_loss
    };
    let all = run(FamilyMask::all());
    let frozen = run(FamilyMask::frozen_scales());
    assert!(all <= frozen, "all-dof {all} should not lose to frozen scales {frozen}");
}

#[test]
fn ce_mix_trains_and_matches_hand_cross_entropy() {
    let g = testnets::mlp_net(41);
    let mut dof = init_quantization(&g, &HwConfig::default(), &calib_for(&g, 5)).unwrap();
    let plan = build_offline(&dof, &g, &dof.hw).unwrap();
    let mut cfg = small_cfg(1, 6);
    cfg.lambda = 0.5;
    let report = train(&g, &plan, &mut dof, &DataSource::synthetic(11), &cfg).unwrap();
    assert!(report.final_loss.is_finite());

    // the mixed scalar equals (1-l)*kd + l*ce with ce from soft targets
    let topo = g.validate().unwrap();
    let mut r = rng(50);
    let mut shape = vec![4];
    shape.extend_from_slice(&g.input_shape);
    let x = rand_tensor(&mut r, &shape, -1.0, 1.5);
    let outs = qft_core::graph::exec::run_fp_collect(&g, &topo, &x).unwrap();
    let t_logits = &outs[&g.layers[topo.output].name];
    let t_feat = &outs[&g.layers[plan.feature].name];

    let mut tape = Tape::new();
    let nodes = plan.record(&g, &dof, &mut tape, &FamilyMask::none()).unwrap();
    let st = record_student(&g, &plan, &dof, &nodes, &mut tape, &x).unwrap();
    let s_feat = tape.value(st.feature).clone();
    let s_logits = tape.value(st.logits).clone();

    let kd = kd_loss(t_feat, &s_feat).0;
    let (n, k) = (t_logits.shape[0], t_logits.shape[1]);
    let mut ce = 0.0f64;
    for i in 0..n {
        let trow = &t_logits.data[i * k..(i + 1) * k];
        let srow = &s_logits.data[i * k..(i + 1) * k];
        let tm = trow.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
        let tz: f64 = trow.iter().map(|&v| ((v as f64) - tm).exp()).sum();
        let sm = srow.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
        let sz: f64 = srow.iter().map(|&v| ((v as f64) - sm).exp()).sum::<f64>().ln() + sm;
        for j in 0..k {
            let p = ((trow[j] as f64) - tm).exp() / tz;
            ce -= p * ((srow[j] as f64) - sz);
        }
    }
    ce /= n as f64;
    let want = mixed_loss(kd, ce as f32, 0.5);

    // rebuild through the trainer's own path at zero steps
    let mut cfg0 = cfg.clone();
    cfg0.epochs = 0;
    cfg0.images_per_epoch = 8;
    cfg0.batch_size = 4;
    let mut dof0 = dof.clone();
    let rep0 = train(
        &g,
        &plan,
        &mut dof0,
        &DataSource::Memory(split_rows(&x)),
        &cfg0,
    )
    .unwrap();
    assert!(
        rel_close(rep0.initial_loss, want as f64, 1e-5),
        "mixed loss {} vs hand {want}",
        rep0.initial_loss
    );
}

fn split_rows(batch: &Tensor) -> Vec<Tensor> {
    let n = batch.shape[0];
    let per = batch.numel() / n;
    let shape = batch.shape[1..].to_vec();
    (0..n)
        .map(|i| Tensor { shape: shape.clone(), data: batch.data[i * per..(i + 1) * per].to_vec() })
        .collect()
}

#[test]
fn lambda_out_of_range_is_rejected() {
    let g = testnets::mlp_net(41);
    let mut dof = init_quantization(&g, &HwConfig::default(), &calib_for(&g, 5)).unwrap();
    let plan = build_offline(&dof, &g, &dof.hw).unwrap();
    let mut cfg = small_cfg(1, 6);
    cfg.lambda = 1.5;
    match train(&g, &plan, &mut dof, &DataSource::synthetic(11), &cfg) {
        Err(TrainError::Data(msg)) => assert!(msg.contains("lambda")),
        other => panic!("expected Data error, got {other:?}"),
    }
}

#[test]
fn nan_aborts_with_the_step_named() {
    let mut g = testnets::mlp_net(51);
    let mut dof = init_quantization(&g, &HwConfig::default(), &calib_for(&g, 5)).unwrap();
    let plan = build_offline(&dof, &g, &dof.hw).unwrap();
    // blow up the teacher: its features overflow f32 and poison the loss
    for v in g.layers[0].weight.as_mut().unwrap().data.iter_mut() {
        *v = 1e30;
    }
    let dir = std::env::temp_dir().join("qft_nan_snapshot_test");
    let _ = std::fs::remove_file(&dir);
    let mut cfg = small_cfg(1, 7);
    cfg.failure_snapshot = Some(dir.clone());
    match train(&g, &plan, &mut dof, &DataSource::synthetic(13), &cfg) {
        Err(TrainError::NumericFailure { step, snapshot }) => {
            assert_eq!(step, 0);
            let path = snapshot.expect("snapshot path recorded");
            let text = std::fs::read_to_string(&path).unwrap();
            assert!(text.contains("fc1"), "snapshot carries the layer state");
            std::fs::remove_file(&path).unwrap();
        }
        other => panic!("expected NumericFailure, got {other:?}"),
    }
}

#[test]
fn poisoned_codes_are_caught_by_the_post_training_audit() {
    // a NaN weight never reaches the loss: the recode clip launders it into a
    // valid code, training runs, and the closing audit reports the bad export
    let g = testnets::mlp_net(51);
    let mut dof = init_quantization(&g, &HwConfig::default(), &calib_for(&g, 5)).unwrap();
    let plan = build_offline(&dof, &g, &dof.hw).unwrap();
    dof.layers[0].weight.data[0] = f32::NAN;
    let mut cfg = small_cfg(1, 7);
    cfg.families = FamilyMask::none();
    match train(&g, &plan, &mut dof, &DataSource::synthetic(13), &cfg) {
        Err(TrainError::Dof(e)) => {
            assert!(e.to_string().contains("weight code"), "{e}");
        }
        other => panic!("expected the audit to fail, got {other:?}"),
    }
}

#[test]
fn synthetic_source_is_deterministic() {
    let a = DataSource::synthetic(99).materialize(12, &[3, 4, 4]).unwrap();
    let b = DataSource::synthetic(99).materialize(12, &[3, 4, 4]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data, y.data);
    }
    let c = DataSource::synthetic(100).materialize(12, &[3, 4, 4]).unwrap();
    assert!(a[0].data != c[0].data, "different seeds draw different images");
}

#[test]
fn dir_source_round_trips_raw_files() {
    let dir = std::env::temp_dir().join("qft_dir_source_test");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let mut r = rng(3);
    let images: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, &[2, 3], -1.0, 1.0)).collect();
    for (i, t) in images.iter().enumerate() {
        let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(format!("img_{i:03}.bin")), bytes).unwrap();
    }
    let loaded = DataSource::Dir(dir.clone()).materialize(5, &[2, 3]).unwrap();
    assert_eq!(loaded.len(), 5);
    for i in 0..5 {
        assert_eq!(loaded[i].data, images[i % 3].data, "cycles in filename order");
    }
    // wrong element count is refused
    std::fs::write(dir.join("zzz.bin"), [0u8; 7]).unwrap();
    assert!(matches!(
        DataSource::Dir(dir.clone()).materialize(1, &[2, 3]),
        Err(TrainError::Data(_))
    ));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn report_json_round_trips() {
    let g = testnets::mlp_net(61);
    let mut dof = init_quantization(&g, &HwConfig::default(), &calib_for(&g, 5)).unwrap();
    let plan = build_offline(&dof, &g, &dof.hw).unwrap();
    let report =
        train(&g, &plan, &mut dof, &DataSource::synthetic(3), &small_cfg(1, 1)).unwrap();
    let text = report.to_json();
    let back: TrainReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.loss_curve, report.loss_curve);
    assert_eq!(back.steps, report.steps);
}

#[test]
fn ce_mix_requires_flat_logits() {
    // a net ending in a conv has no 2-d logits to soften
    let mut r = rng(71);
    let g = Graph {
        layers: vec![
            Layer::weighted(
                "c",
                LayerKind::Conv2d { stride: 1, pad: 1 },
                rand_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5),
                None,
            ),
            Layer::bare("a", LayerKind::Relu),
        ],
        edges: vec![("c".into(), "a".into())],
        input_shape: vec![3, 4, 4],
        feature_layer: None,
    };
    let mut dof = init_quantization(&g, &HwConfig::default(), &calib_for(&g, 5)).unwrap();
    let plan = build_offline(&dof, &g, &dof.hw).unwrap();
    let mut cfg = small_cfg(1, 8);
    cfg.lambda = 0.3;
    match train(&g, &plan, &mut dof, &DataSource::synthetic(17), &cfg) {
        Err(TrainError::Data(msg)) => assert!(msg.contains("2-d")),
        other => panic!("expected Data error, got {other:?}"),
    }
}
