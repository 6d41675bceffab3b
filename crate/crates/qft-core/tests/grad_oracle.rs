//! Every tape op's backward pass checked against central finite differences
//! of the frozen f64 surrogate in `qft_core::oracle`. The surrogate freezes
//! all discrete decisions at the base point, so its finite differences are
//! exactly the straight-through gradients the tape is specified to produce.

use qft_core::oracle::{rel_close, Surrogate};
use qft_core::{Tape, Tensor, VarId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values that stay clear of relu kinks and half-integer rounding
/// boundaries: integer part plus a fraction in (0.1, 0.4) or (0.6, 0.9).
fn safe_vals(r: &mut ChaCha8Rng, n: usize, int_range: i32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let ip = r.gen_range(-int_range..=int_range) as f32;
            let frac = if r.gen_bool(0.5) { r.gen_range(0.1..0.4) } else { r.gen_range(0.6..0.9) };
            let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            ip + sign * frac
        })
        .collect()
}

fn plain_vals(r: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

/// Project an output to a scalar loss through fixed pseudo-random weights so
/// every output coordinate carries a distinct gradient.
fn weighted_loss(tape: &mut Tape, y: VarId, r: &mut ChaCha8Rng) -> VarId {
    let shape = tape.value(y).shape.clone();
    let w = t(&shape, plain_vals(r, shape.iter().product(), -1.0, 1.0));
    let w = tape.constant(w);
    let m = tape.mul(y, w).unwrap();
    tape.reduce_sum(m)
}

fn check_all(tape: &mut Tape, loss: VarId, leaves: &[VarId]) {
    tape.backward(loss).unwrap();
    let sur = Surrogate::freeze(tape);
    for &leaf in leaves {
        let n = tape.value(leaf).numel();
        for coord in 0..n {
            let fd = sur.fd(loss.index(), leaf.index(), coord, H);
            let an = tape.grad(leaf).data[coord] as f64;
            assert!(
                rel_close(fd, an, TOL),
                "leaf node {} coord {}: fd {} vs backward {}",
                leaf.index(),
                coord,
                fd,
                an
            );
        }
    }
}

#[test]
fn grad_add_sub_same_shape_and_scalar() {
    let mut r = rng(11);
    for scalar_side in 0..3 {
        let mut tp = Tape::new();
        let a = tp.leaf(t(&[6], plain_vals(&mut r, 6, -2.0, 2.0)), true);
        let b = match scalar_side {
            0 => tp.leaf(t(&[6], plain_vals(&mut r, 6, -2.0, 2.0)), true),
            _ => tp.leaf(Tensor::scalar(r.gen_range(0.5..1.5)), true),
        };
        let y = if scalar_side == 2 { tp.add(b, a).unwrap() } else { tp.add(a, b).unwrap() };
        let y2 = tp.sub(y, a).unwrap();
        let loss = weighted_loss(&mut tp, y2, &mut r);
        check_all(&mut tp, loss, &[a, b]);
    }
}

#[test]
fn grad_mul_div_same_shape_and_scalar() {
    let mut r = rng(12);
    for scalar_b in [false, true] {
        let mut tp = Tape::new();
        let a = tp.leaf(t(&[5], plain_vals(&mut r, 5, 0.5, 2.0)), true);
        let b = if scalar_b {
            tp.leaf(Tensor::scalar(1.37), true)
        } else {
            tp.leaf(t(&[5], plain_vals(&mut r, 5, 0.5, 2.0)), true)
        };
        let c = tp.leaf(t(&[5], plain_vals(&mut r, 5, 0.5, 2.0)), true);
        let m = tp.mul(a, b).unwrap();
        let d = tp.div(m, c).unwrap();
        let loss = weighted_loss(&mut tp, d, &mut r);
        check_all(&mut tp, loss, &[a, b, c]);
    }
}

#[test]
fn grad_const_ops() {
    let mut r = rng(13);
    let mut tp = Tape::new();
    let a = tp.leaf(t(&[4], plain_vals(&mut r, 4, -2.0, 2.0)), true);
    let y = tp.add_const(a, 0.7);
    let y = tp.mul_const(y, -1.9);
    let loss = weighted_loss(&mut tp, y, &mut r);
    check_all(&mut tp, loss, &[a]);
}

#[test]
fn grad_bcast_ops_axis0_and_axis1() {
    let mut r = rng(14);
    for axis in [0usize, 1] {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[3, 4], plain_vals(&mut r, 12, -2.0, 2.0)), true);
        let vlen = if axis == 0 { 3 } else { 4 };
        let v = tp.leaf(t(&[vlen], plain_vals(&mut r, vlen, 0.5, 2.0)), true);
        let y = tp.add_bcast(x, v, axis).unwrap();
        let y = tp.mul_bcast(y, v, axis).unwrap();
        let y = tp.div_bcast(y, v, axis).unwrap();
        let loss = weighted_loss(&mut tp, y, &mut r);
        check_all(&mut tp, loss, &[x, v]);
    }
}

#[test]
fn grad_bcast_rank4_channel_axis() {
    let mut r = rng(15);
    let mut tp = Tape::new();
    let x = tp.leaf(t(&[2, 3, 2, 2], plain_vals(&mut r, 24, -2.0, 2.0)), true);
    let v = tp.leaf(t(&[3], plain_vals(&mut r, 3, 0.5, 2.0)), true);
    let y = tp.div_bcast(x, v, 1).unwrap();
    let loss = weighted_loss(&mut tp, y, &mut r);
    check_all(&mut tp, loss, &[x, v]);
}

#[test]
fn grad_matmul_both_orientations() {
    let mut r = rng(16);
    for tb in [false, true] {
        let mut tp = Tape::new();
        let a = tp.leaf(t(&[3, 4], plain_vals(&mut r, 12, -1.5, 1.5)), true);
        let bshape = if tb { [5, 4] } else { [4, 5] };
        let b = tp.leaf(t(&bshape, plain_vals(&mut r, 20, -1.5, 1.5)), true);
        let y = tp.matmul(a, b, tb).unwrap();
        let loss = weighted_loss(&mut tp, y, &mut r);
        check_all(&mut tp, loss, &[a, b]);
    }
}

#[test]
fn grad_conv2d_strides_and_padding() {
    let mut r = rng(17);
    for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2, 3, 5, 5], plain_vals(&mut r, 150, -1.5, 1.5)), true);
        let w = tp.leaf(t(&[4, 3, 3, 3], plain_vals(&mut r, 108, -1.0, 1.0)), true);
        let y = tp.conv2d(x, w, stride, pad).unwrap();
        let loss = weighted_loss(&mut tp, y, &mut r);
        check_all(&mut tp, loss, &[x, w]);
    }
}

#[test]
fn grad_depthwise_conv2d() {
    let mut r = rng(18);
    for (stride, pad) in [(1usize, 1usize), (2, 1)] {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2, 3, 5, 5], plain_vals(&mut r, 150, -1.5, 1.5)), true);
        let w = tp.leaf(t(&[3, 3, 3], plain_vals(&mut r, 27, -1.0, 1.0)), true);
        let y = tp.depthwise_conv2d(x, w, stride, pad).unwrap();
        let loss = weighted_loss(&mut tp, y, &mut r);
        check_all(&mut tp, loss, &[x, w]);
    }
}

#[test]
fn grad_relu_and_relu6() {
    let mut r = rng(19);
    let mut tp = Tape::new();
    // values straddle 0 and 6 without sitting on them
    let vals: Vec<f32> = vec![-3.3, -0.4, 0.6, 2.2, 5.4, 6.7, 8.1, -7.2];
    let x = tp.leaf(t(&[8], vals.clone()), true);
    let y = tp.relu(x);
    let loss = weighted_loss(&mut tp, y, &mut r);
    check_all(&mut tp, loss, &[x]);

    let mut tp = Tape::new();
    let x = tp.leaf(t(&[8], vals), true);
    let y = tp.relu6(x);
    let loss = weighted_loss(&mut tp, y, &mut r);
    check_all(&mut tp, loss, &[x]);
}

#[test]
fn grad_maxpool() {
    let mut r = rng(20);
    let mut tp = Tape::new();
    let x = tp.leaf(t(&[2, 2, 4, 4], plain_vals(&mut r, 64, -2.0, 2.0)), true);
    let y = tp.maxpool(x, 2, 2).unwrap();
    let loss = weighted_loss(&mut tp, y, &mut r);
    check_all(&mut tp, loss, &[x]);
}

#[test]
fn grad_pools_and_concat() {
    let mut r = rng(21);
    let mut tp = Tape::new();
    let x = tp.leaf(t(&[2, 3, 3, 3], plain_vals(&mut r, 54, -2.0, 2.0)), true);
    let a = tp.avgpool_global(x).unwrap();
    let s = tp.sum_spatial(x).unwrap();
    let c = tp.concat(&[a, s], 1).unwrap();
    let loss = weighted_loss(&mut tp, c, &mut r);
    check_all(&mut tp, loss, &[x]);
}

#[test]
fn grad_l2norm_logsoftmax_reciprocal_outer() {
    let mut r = rng(22);
    let mut tp = Tape::new();
    let x = tp.leaf(t(&[6], plain_vals(&mut r, 6, 0.4, 2.0)), true);
    let n = tp.l2_norm(x);
    check_all(&mut tp, n, &[x]);

    let mut tp = Tape::new();
    let x = tp.leaf(t(&[2, 5], plain_vals(&mut r, 10, -2.0, 2.0)), true);
    let y = tp.log_softmax(x).unwrap();
    let loss = weighted_loss(&mut tp, y, &mut r);
    check_all(&mut tp, loss, &[x]);

    let mut tp = Tape::new();
    let x = tp.leaf(t(&[5], plain_vals(&mut r, 5, 0.4, 2.0)), true);
    let y = tp.reciprocal(x);
    let loss = weighted_loss(&mut tp, y, &mut r);
    check_all(&mut tp, loss, &[x]);

    let mut tp = Tape::new();
    let a = tp.leaf(t(&[3], plain_vals(&mut r, 3, -1.5, 1.5)), true);
    let b = tp.leaf(t(&[4], plain_vals(&mut r, 4, -1.5, 1.5)), true);
    let y = tp.outer_product(a, b).unwrap();
    let loss = weighted_loss(&mut tp, y, &mut r);
    check_all(&mut tp, loss, &[a, b]);
}

#[test]
fn grad_round_ste_clip_mixed_in_and_out_of_range() {
    let mut r = rng(23);
    let mut tp = Tape::new();
    let x = tp.leaf(t(&[12], safe_vals(&mut r, 12, 10)), true);
    let q = tp.round_ste_clip(x, -7.0, 7.0).unwrap();
    let loss = weighted_loss(&mut tp, q, &mut r);
    check_all(&mut tp, loss, &[x]);
}

#[test]
fn grad_requant_scalar_and_vector_factor() {
    let mut r = rng(24);
    for vector_f in [false, true] {
        for relu in [false, true] {
            let mut tp = Tape::new();
            let ch = 3usize;
            let fdata = plain_vals(&mut r, if vector_f { ch } else { 1 }, 0.02, 0.08);
            // choose accumulator values whose recoded products avoid
            // half-integer boundaries: target product = int + safe fraction
            let n = 2 * ch * 4;
            let mut xdata = Vec::with_capacity(n);
            for i in 0..n {
                let c = (i / 4) % ch;
                let f = fdata[if vector_f { c } else { 0 }];
                let target = safe_vals(&mut r, 1, 300)[0];
                xdata.push(target / f);
            }
            let x = tp.leaf(t(&[2, ch, 2, 2], xdata), true);
            let fshape = if vector_f { vec![ch] } else { vec![1] };
            let f = tp.leaf(t(&fshape, fdata), true);
            let y = tp.requant(x, f, 3.0, 0.0, 255.0, relu).unwrap();
            let loss = weighted_loss(&mut tp, y, &mut r);
            check_all(&mut tp, loss, &[x, f]);
        }
    }
}

#[test]
fn grad_requant2_with_and_without_relu() {
    let mut r = rng(25);
    for relu in [false, true] {
        let mut tp = Tape::new();
        let ch = 2usize;
        let n = 2 * ch * 3;
        let g1d = plain_vals(&mut r, ch, 0.3, 0.9);
        let g2d = plain_vals(&mut r, ch, 0.3, 0.9);
        let x1d = plain_vals(&mut r, n, -40.0, 40.0);
        // solve x2 so the weighted sum lands clear of rounding boundaries
        let mut x2d = Vec::with_capacity(n);
        for i in 0..n {
            let c = (i / 3) % ch;
            let target = safe_vals(&mut r, 1, 200)[0];
            x2d.push((target - g1d[c] * x1d[i]) / g2d[c]);
        }
        let x1 = tp.leaf(t(&[2, ch, 3], x1d), true);
        let x2 = tp.leaf(t(&[2, ch, 3], x2d), true);
        let g1 = tp.leaf(t(&[ch], g1d), true);
        let g2 = tp.leaf(t(&[ch], g2d), true);
        let y = tp.requant2(x1, x2, g1, g2, 10.0, 0.0, 255.0, relu).unwrap();
        let loss = weighted_loss(&mut tp, y, &mut r);
        check_all(&mut tp, loss, &[x1, x2, g1, g2]);
    }
}

/// The classic scalar-quantizer example: L(s) = sum((s*q - w)^2) with
/// q = clip(round(w/s)). The straight-through gradient treats q's dependence
/// on s through the rounding as identity inside the clip range. At w = 2.7,
/// s = 1.0 this gives dL/ds = 2*(3 - 2.7)*(3 - 2.7/1) = 0.18.
#[test]
fn quantizer_scale_gradient_matches_hand_value() {
    let mut tp = Tape::new();
    let w = tp.leaf(Tensor::from_vec(&[1], vec![2.7]).unwrap(), false);
    let s = tp.leaf(Tensor::scalar(1.0), true);
    let d = tp.div(w, s).unwrap();
    let q = tp.round_ste_clip(d, -7.0, 7.0).unwrap();
    let back = tp.mul(q, s).unwrap();
    let e = tp.sub(back, w).unwrap();
    let e2 = tp.mul(e, e).unwrap();
    let l = tp.reduce_sum(e2);
    tp.backward(l).unwrap();
    let g = tp.grad(s).data[0] as f64;
    assert!((g - 0.18).abs() < 1e-6, "got {g}");
    // and the oracle agrees
    let sur = Surrogate::freeze(&tp);
    let fd = sur.fd(l.index(), s.index(), 0, H);
    assert!(rel_close(fd, g, TOL), "fd {fd} vs {g}");
}

/// A deeper composite graph pushing gradients through two lossy stages.
#[test]
fn grad_composite_fakequant_chain() {
    let mut r = rng(26);
    let mut tp = Tape::new();
    let x = tp.leaf(t(&[2, 3, 4, 4], plain_vals(&mut r, 96, -1.5, 1.5)), false);
    let w = tp.leaf(t(&[4, 3, 3, 3], plain_vals(&mut r, 108, -0.8, 0.8)), true);
    let s_in = tp.leaf(t(&[3], plain_vals(&mut r, 3, 0.02, 0.05)), true);
    let s_out = tp.leaf(t(&[4], plain_vals(&mut r, 4, 0.1, 0.3)), true);
    let left = tp.reciprocal(s_in);
    let t1 = tp.div_bcast(w, left, 1).unwrap();
    let t2 = tp.div_bcast(t1, s_out, 0).unwrap();
    let wq = tp.round_ste_clip(t2, -7.0, 7.0).unwrap();
    let codes = tp.div_bcast(x, s_in, 1).unwrap();
    let codes = tp.round_ste_clip(codes, 0.0, 255.0).unwrap();
    let acc = tp.conv2d(codes, wq, 1, 1).unwrap();
    let acc = tp.relu(acc);
    let y = tp.requant(acc, s_out, 0.0, 0.0, 255.0, false).unwrap();
    let loss = weighted_loss(&mut tp, y, &mut r);
    check_all(&mut tp, loss, &[w, s_in, s_out]);
}
