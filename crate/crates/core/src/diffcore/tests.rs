use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::par::{with_exec_mode, ExecMode};

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn pad_idx(i: i64, len: usize, mode: PadMode) -> Option<usize> {
    match mode {
        PadMode::Periodic => Some(i.rem_euclid(len as i64) as usize),
        PadMode::Zero => (0..len as i64).contains(&i).then_some(i as usize),
    }
}

/// Direct loop cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: &Conv2dSpec) -> Tensor<f64> {
    let [n, ci, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [co, _, kh, kw] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let [ph, pw] = [spec.pad.axes[0], spec.pad.axes[1]];
    let oh = (h + 2 * ph.amount - kh) / spec.stride[0] + 1;
    let ow = (wd + 2 * pw.amount - kw) / spec.stride[1] + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for ni in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ty in 0..kh {
                            for tx in 0..kw {
                                let iy = (y * spec.stride[0] + ty) as i64 - ph.amount as i64;
                                let ix = (xo * spec.stride[1] + tx) as i64 - pw.amount as i64;
                                if let (Some(iy), Some(ix)) = (pad_idx(iy, h, ph.mode), pad_idx(ix, wd, pw.mode)) {
                                    acc += w.data()[((o * ci + c) * kh + ty) * kw + tx]
                                        * x.data()[((ni * ci + c) * h + iy) * wd + ix];
                                }
                            }
                        }
                    }
                    out.data_mut()[((ni * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

/// Direct scatter transposed convolution.
fn naive_deconv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &Conv2dSpec, out_hw: [usize; 2]) -> Tensor<f64> {
    let [n, ci, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [_, co, kh, kw] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let [ph, pw] = [spec.pad.axes[0], spec.pad.axes[1]];
    let [oh, ow] = out_hw;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for ni in 0..n {
        for c in 0..ci {
            for y in 0..h {
                for xi in 0..wd {
                    let v = x.data()[((ni * ci + c) * h + y) * wd + xi];
                    for o in 0..co {
                        for ty in 0..kh {
                            for tx in 0..kw {
                                let oy = (y * spec.stride[0] + ty) as i64 - ph.amount as i64;
                                let ox = (xi * spec.stride[1] + tx) as i64 - pw.amount as i64;
                                if let (Some(oy), Some(ox)) = (pad_idx(oy, oh, ph.mode), pad_idx(ox, ow, pw.mode)) {
                                    out.data_mut()[((ni * co + o) * oh + oy) * ow + ox] +=
                                        v * w.data()[((c * co + o) * kh + ty) * kw + tx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn naive_aniso(x: &Tensor<f64>, w: &Tensor<f64>, spec: &AnisoSpec) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let [co, ci, k] = <[usize; 3]>::try_from(w.shape()).unwrap();
    let len = s[2 + spec.axis];
    let (p, mode, out_len) = match spec.pad {
        AnisoPad::Same => (k / 2, PadMode::Zero, len),
        AnisoPad::Periodic => (k / 2, PadMode::Periodic, len),
        AnisoPad::Valid => (0, PadMode::Zero, len - k + 1),
    };
    let mut os = s.clone();
    os[1] = co;
    os[2 + spec.axis] = out_len;
    let mut out = Tensor::zeros(&os);
    let at = |sh: &[usize], i: [usize; 5]| (((i[0] * sh[1] + i[1]) * sh[2] + i[2]) * sh[3] + i[3]) * sh[4] + i[4];
    for ni in 0..s[0] {
        for o in 0..co {
            for a in 0..os[2] {
                for b in 0..os[3] {
                    for c3 in 0..os[4] {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for t in 0..k {
                                let mut idx = [ni, c, a, b, c3];
                                let src = (idx[2 + spec.axis] + t) as i64 - p as i64;
                                if let Some(src) = pad_idx(src, len, mode) {
                                    idx[2 + spec.axis] = src;
                                    acc += w.data()[(o * ci + c) * k + t] * x.data()[at(&s, idx)];
                                }
                            }
                        }
                        out.data_mut()[at(&os, [ni, o, a, b, c3])] = acc;
                    }
                }
            }
        }
    }
    out
}

fn specs() -> Vec<(Conv2dSpec, [usize; 4], [usize; 4])> {
    let p = |a| AxisPad::periodic(a);
    let z = |a| AxisPad::zero(a);
    vec![
        (Conv2dSpec { stride: [1, 1], pad: PadSpec::new(p(1), z(1)) }, [2, 3, 8, 6], [4, 3, 3, 3]),
        (Conv2dSpec { stride: [2, 2], pad: PadSpec::new(p(1), z(1)) }, [2, 2, 8, 7], [3, 2, 3, 3]),
        (Conv2dSpec { stride: [2, 1], pad: PadSpec::new(p(0), z(0)) }, [1, 2, 6, 5], [2, 2, 1, 1]),
        (Conv2dSpec { stride: [1, 2], pad: PadSpec::new(z(2), z(0)) }, [1, 1, 7, 9], [2, 1, 5, 2]),
    ]
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (spec, xs, ws) in specs() {
        let x = rand_t(&xs, &mut rng);
        let w = rand_t(&ws, &mut rng);
        let b = rand_t(&[ws[0]], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), &spec).unwrap();
        let expect = naive_conv(&x, &w, b.data(), &spec);
        assert_eq!(g.value(y).shape(), expect.shape());
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12, "{spec:?}");
    }
}

#[test]
fn deconv2d_matches_naive_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = [
        (Conv2dSpec { stride: [2, 2], pad: PadSpec::new(AxisPad::periodic(1), AxisPad::zero(1)) }, [2, 3, 4, 5], [3, 2, 4, 4]),
        (Conv2dSpec { stride: [1, 2], pad: PadSpec::new(AxisPad::zero(0), AxisPad::zero(1)) }, [1, 2, 3, 3], [2, 3, 3, 3]),
        (Conv2dSpec { stride: [2, 1], pad: PadSpec::new(AxisPad::periodic(0), AxisPad::zero(0)) }, [1, 1, 3, 4], [1, 2, 2, 1]),
    ];
    for (spec, xs, ws) in cases {
        let x = rand_t(&xs, &mut rng);
        let w = rand_t(&ws, &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.deconv2d(xv, wv, None, &spec).unwrap();
        let out = g.value(y);
        let expect = naive_deconv(&x, &w, &spec, [out.shape()[2], out.shape()[3]]);
        assert!(out.max_abs_diff(&expect) < 1e-12, "{spec:?}");
    }
}

#[test]
fn deconv_output_lengths() {
    let spec = Conv2dSpec { stride: [2, 2], pad: PadSpec::new(AxisPad::periodic(1), AxisPad::zero(1)) };
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
    let w = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let y = g.deconv2d(x, w, None, &spec).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 16, 16]);
}

/// `<conv(x), y> == <x, deconv(y)>` for the same weights and geometry.
#[test]
fn conv_and_deconv_are_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = Conv2dSpec { stride: [2, 2], pad: PadSpec::new(AxisPad::periodic(1), AxisPad::zero(1)) };
    let x = rand_t(&[1, 2, 8, 8], &mut rng);
    let w = rand_t(&[3, 2, 4, 4], &mut rng);
    let y = rand_t(&[1, 3, 4, 4], &mut rng);
    let mut g = Graph::new();
    let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(y.clone()));
    let cx = g.conv2d(xv, wv, None, &spec).unwrap();
    // the deconv weight layout swaps the channel axes, which is the same buffer
    let wt = g.constant(w.clone().reshaped(&[3, 2, 4, 4]).unwrap());
    let _ = wv;
    let dy = g.deconv2d(yv, wt, None, &spec).unwrap();
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(dy).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn aniso_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for axis in 0..3 {
        for pad in [AnisoPad::Same, AnisoPad::Periodic, AnisoPad::Valid] {
            let spec = AnisoSpec { axis, pad };
            let x = rand_t(&[2, 2, 5, 4, 6], &mut rng);
            let w = rand_t(&[3, 2, 3], &mut rng);
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv3d_aniso(xv, wv, None, &spec).unwrap();
            let expect = naive_aniso(&x, &w, &spec);
            assert_eq!(g.value(y).shape(), expect.shape());
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12, "{spec:?}");
        }
    }
}

#[test]
fn identity_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&[1, 1, 6, 5], &mut rng);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let spec = Conv2dSpec { stride: [1, 1], pad: PadSpec::new(AxisPad::periodic(1), AxisPad::zero(1)) };
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w));
    let y = g.conv2d(xv, wv, None, &spec).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn periodic_conv_commutes_with_roll() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = Conv2dSpec { stride: [1, 1], pad: PadSpec::new(AxisPad::periodic(1), AxisPad::zero(1)) };
    let x = rand_t(&[1, 2, 8, 5], &mut rng);
    let w = rand_t(&[2, 2, 3, 3], &mut rng);
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, &spec).unwrap();
        g.value(y).clone()
    };
    for s in [1, 3, -2] {
        assert!(run(&x.roll(2, s)).max_abs_diff(&run(&x).roll(2, s)) < 1e-12);
    }
}

#[test]
fn periodic_stride_requires_divisible_length() {
    let spec = Conv2dSpec { stride: [2, 1], pad: PadSpec::new(AxisPad::periodic(1), AxisPad::zero(1)) };
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 7, 4]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(g.conv2d(x, w, None, &spec).is_err());
}

#[test]
fn kernels_agree_across_exec_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = Conv2dSpec { stride: [2, 2], pad: PadSpec::new(AxisPad::periodic(1), AxisPad::zero(1)) };
    let x = rand_t(&[2, 3, 8, 8], &mut rng).cast::<f32>();
    let w = rand_t(&[4, 3, 3, 3], &mut rng).cast::<f32>();
    let run = || {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let wv = g.variable(w.clone());
        let y = g.conv2d(xv, wv, None, &spec).unwrap();
        let l = g.sum(y);
        let gr = g.backward(l).unwrap();
        (g.value(y).clone(), gr.get(xv).unwrap().clone(), gr.get(wv).unwrap().clone())
    };
    let a = with_exec_mode(ExecMode::Sequential, run);
    let b = with_exec_mode(ExecMode::Parallel, run);
    assert_eq!(a, b);
}

fn params_with(entries: &[(&str, Tensor<f64>)]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (n, t) in entries {
        p.add(*n, t.clone(), true).unwrap();
    }
    p
}

fn assert_grads_ok(results: &[GradCheckResult], tol: f64) {
    for r in results {
        assert!(r.rel_err < tol, "{}: rel err {}", r.name, r.rel_err);
    }
}

#[test]
fn gradcheck_conv_deconv_aniso() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let proj1 = rand_t(&[2, 3, 4, 3], &mut rng);
    let proj2 = rand_t(&[2, 2, 8, 6], &mut rng);
    let proj3 = rand_t(&[2, 2, 4, 1, 6], &mut rng);
    let mut p = params_with(&[
        ("x", rand_t(&[2, 2, 8, 6], &mut rng)),
        ("w", rand_t(&[3, 2, 3, 3], &mut rng)),
        ("b", rand_t(&[3], &mut rng)),
        ("wd", rand_t(&[3, 2, 4, 4], &mut rng)),
        ("x3", rand_t(&[2, 1, 4, 5, 6], &mut rng)),
        ("wa", rand_t(&[2, 1, 5], &mut rng)),
    ]);
    let conv = Conv2dSpec { stride: [2, 2], pad: PadSpec::new(AxisPad::periodic(1), AxisPad::zero(1)) };
    let res = check_params(
        &mut p,
        |g, p| {
            let [x, w, b, wd, x3, wa] =
                ["x", "w", "b", "wd", "x3", "wa"].map(|n| g.param(p, p.id_of(n).unwrap()));
            let y = g.conv2d(x, w, Some(b), &conv)?;
            let d = g.deconv2d(y, wd, None, &conv)?;
            let a = g.conv3d_aniso(x3, wa, None, &AnisoSpec { axis: 1, pad: AnisoPad::Valid })?;
            let l1 = g.dot_const(y, proj1.clone())?;
            let l2 = g.dot_const(d, proj2.clone())?;
            let l3 = g.dot_const(a, proj3.clone())?;
            let s = g.add(l1, l2)?;
            g.add(s, l3)
        },
        &GradCheckConfig { max_coords: 40, ..Default::default() },
    )
    .unwrap();
    assert_grads_ok(&res, 1e-6);
}

#[test]
fn gradcheck_norm_and_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = rand_t(&[3, 2, 4], &mut rng);
    let proj = rand_t(&[3, 2], &mut rng);
    let mut p = params_with(&[
        ("x", rand_t(&[3, 2, 4, 5], &mut rng)),
        ("gamma", rand_t(&[2], &mut rng)),
        ("beta", rand_t(&[2], &mut rng)),
    ]);
    let rm = Tensor::zeros(&[2]);
    let rv = Tensor::full(&[2], 1.0);
    for mode in [BnMode::Train, BnMode::Infer] {
        let res = check_params(
            &mut p,
            |g, p| {
                let [x, ga, be] = ["x", "gamma", "beta"].map(|n| g.param(p, p.id_of(n).unwrap()));
                let (y, _) = g.batchnorm(x, ga, be, (&rm, &rv), mode)?;
                let y2 = g.scale(y, 1.7);
                let sm = g.softmax(y2, 1)?;
                let lse = g.logsumexp(y)?;
                let t = g.constant(target.clone());
                let m = g.mse(lse, t)?;
                let sl = g.slice_batch(sm, 1, 2)?;
                let r = g.reshape(sl, &[2, 2, 4, 5])?;
                let lse2 = g.logsumexp(r)?;
                let lse3 = g.logsumexp(lse2)?;
                let d = g.dot_const(lse3, proj.slice_rows())?;
                let mean = g.mean(sm);
                let s = g.add(m, d)?;
                g.add(s, mean)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_grads_ok(&res, 1e-6);
    }
}

trait SliceRows {
    fn slice_rows(&self) -> Tensor<f64>;
}

impl SliceRows for Tensor<f64> {
    fn slice_rows(&self) -> Tensor<f64> {
        Tensor::from_vec(&[2, 2], self.data()[..4].to_vec()).unwrap()
    }
}

#[test]
fn gradcheck_relu_softmax_planes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let target = rand_t(&[2, 3, 4, 4], &mut rng);
    // values kept away from zero so relu is differentiable at every probe
    let x = Tensor::from_fn(&[2, 3, 4, 4], |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) { v } else { -v }
    });
    let mut p = params_with(&[("x", x)]);
    let res = check_params(
        &mut p,
        |g, p| {
            let x = g.param(p, p.id_of("x").unwrap());
            let r = g.relu(x);
            let s = g.softmax(r, 2)?;
            let t = g.constant(target.clone());
            let m = g.mse(s, t)?;
            let m2 = g.mse(r, t)?;
            g.add(m, m2)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_grads_ok(&res, 1e-6);
}

#[test]
fn backward_accumulates_into_params() {
    let mut p = ParamSet::<f64>::new();
    let id = p.add("w", Tensor::full(&[2], 2.0), true).unwrap();
    let mut g = Graph::new();
    let w = g.param(&p, id);
    let l = g.sum(w);
    g.backward_into(l, &mut p).unwrap();
    g.backward_into(l, &mut p).unwrap();
    assert_eq!(p.grad(id).data(), &[2.0, 2.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.variable(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(DiffError::NonScalarLoss(_))));
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::full(&[3], 1.0));
    let s = g.stop_gradient(x);
    let y = g.add(x, s).unwrap();
    let l = g.sum(y);
    let gr = g.backward(l).unwrap();
    assert_eq!(gr.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn batchnorm_train_stats() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let ga = g.constant(Tensor::full(&[1], 1.0));
    let be = g.constant(Tensor::zeros(&[1]));
    let (rm, rv) = (Tensor::zeros(&[1]), Tensor::full(&[1], 1.0));
    let (y, stats) = g.batchnorm(x, ga, be, (&rm, &rv), BnMode::Train).unwrap();
    let stats = stats.unwrap();
    assert!((stats.mean[0] - 2.5).abs() < 1e-12);
    assert!((stats.var[0] - 5.0 / 3.0).abs() < 1e-12);
    let mean: f64 = g.value(y).data().iter().sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Rolling the periodic axis of a stride-s periodic conv input by s·k rolls the output by k.
    #[test]
    fn strided_periodic_conv_is_shift_equivariant(seed in 0u64..1000, k in 0i64..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = Conv2dSpec { stride: [2, 1], pad: PadSpec::new(AxisPad::periodic(1), AxisPad::zero(1)) };
        let x = rand_t(&[1, 1, 8, 3], &mut rng);
        let w = rand_t(&[1, 1, 3, 3], &mut rng);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(xv, wv, None, &spec).unwrap();
            g.value(y).clone()
        };
        prop_assert!(run(&x.roll(2, 2 * k)).max_abs_diff(&run(&x).roll(2, k)) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[3, 4], vals).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
