use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-nested-loop convolution.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (bs, c, h, wd) = x.dims4().unwrap();
    let (o, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[bs, o, oh, ow]);
    for n in 0..bs {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at4(n, ic, iy as usize, ix as usize) * w.at4(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                    out.data_mut()[((n * o + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

/// Direct scatter-form transposed convolution: each input pixel stamps the kernel.
fn naive_tconv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (bs, c, h, wd) = x.dims4().unwrap();
    let (_, o, kh, kw) = w.dims4().unwrap();
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = Tensor::zeros(&[bs, o, oh, ow]);
    for n in 0..bs {
        for ic in 0..c {
            for iy in 0..h {
                for ix in 0..wd {
                    for oc in 0..o {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (iy * stride + ky) as isize - pad as isize;
                                let xx = (ix * stride + kx) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < oh && (xx as usize) < ow {
                                    out.data_mut()[((n * o + oc) * oh + y as usize) * ow + xx as usize] +=
                                        x.at4(n, ic, iy, ix) * w.at4(ic, oc, ky, kx);
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

fn conv_on_tape(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut t = Tape::new();
    let o = w.shape()[0];
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(Tensor::zeros(&[o])));
    let y = t.conv2d(xv, wv, bv, stride, pad).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let w = Tensor::full(&[1, 1, 1, 1], 1.0);
    assert_eq!(conv_on_tape(&x, &w, 1, 0), x);
}

#[test]
fn conv_stride_two_shape() {
    let x = Tensor::zeros(&[1, 1, 4, 4]);
    let w = Tensor::zeros(&[1, 1, 3, 3]);
    assert_eq!(conv_on_tape(&x, &w, 2, 1).shape(), &[1, 1, 2, 2]);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, stride, pad).unwrap();
        let want = naive_conv(&x, &w, b.data(), stride, pad);
        assert!(t.value(y).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = t.constant(Tensor::zeros(&[1]));
    let err = t.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
    assert!(err.contains("2 channels") && err.contains("expects 3"), "{err}");
}

#[test]
fn tconv_delta_kernel_interleaves_zeros() {
    // With a kernel that is 1 at tap (1,1) and padding 1, input (i,j) lands on output (2i,2j).
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut w = Tensor::zeros(&[1, 1, 4, 4]);
    w.data_mut()[5] = 1.0;
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(Tensor::zeros(&[1])));
    let y = t.tconv2d(xv, wv, bv, 1).unwrap();
    let want = naive_tconv(&x, &w, 2, 1);
    assert_eq!(t.value(y), &want);
    #[rustfmt::skip]
    let expect = [
        1.0, 0.0, 2.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        3.0, 0.0, 4.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
    ];
    assert_eq!(t.value(y).data(), &expect);
}

#[test]
fn tconv_matches_scatter_oracle_and_doubles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w) in [(1, 1), (3, 2), (5, 5)] {
        let x = rand_tensor(&[2, 3, h, w], &mut rng);
        let k = rand_tensor(&[3, 4, 4, 4], &mut rng);
        let mut t = Tape::new();
        let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(Tensor::zeros(&[4])));
        let y = t.tconv2d(xv, kv, bv, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 4, 2 * h, 2 * w]);
        assert!(t.value(y).max_abs_diff(&naive_tconv(&x, &k, 2, 1)) < 1e-12);
    }
}

#[test]
fn tconv_rejects_non_doubling_kernel() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let w = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let b = t.constant(Tensor::zeros(&[1]));
    assert!(t.tconv2d(x, w, b, 1).is_err());
}

#[test]
fn tconv_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let x = rand_tensor(&[1, 3, 4, 5], &mut rng);
        let k = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let y = rand_tensor(&[1, 2, 8, 10], &mut rng);
        let mut t = Tape::new();
        let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(Tensor::zeros(&[2])));
        let up = t.tconv2d(xv, kv, bv, 1).unwrap();
        let lhs = t.value(up).dot(&y);
        // Same kernel memory read as an O×C conv kernel.
        let rhs = x.dot(&conv_on_tape(&y, &k, 2, 1));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_input_grad_is_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let x = rand_tensor(&[2, 3, 6, 6], &mut rng);
        let w = rand_tensor(&[4, 3, k, k], &mut rng);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let wv = t.constant(w.clone());
        let bv = t.constant(Tensor::zeros(&[4]));
        let out = t.conv2d(xv, wv, bv, stride, pad).unwrap();
        let y = rand_tensor(t.value(out).shape(), &mut rng);
        let lhs = t.value(out).dot(&y);
        t.backward_seeded(out, &y).unwrap();
        let rhs = x.dot(&t.grad(xv));
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

fn two_pass_bn(x: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims4().unwrap();
    let mut out = x.clone();
    for ch in 0..c {
        let mut vals = vec![];
        for n in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    vals.push(x.at4(n, ch, y, xx));
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for n in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let i = ((n * c + ch) * h + y) * w + xx;
                    out.data_mut()[i] = (x.data()[i] - mean) / (var + BN_EPS).sqrt();
                }
            }
        }
    }
    out
}

fn bn_train(x: &Tensor, scale: f64, shift: f64) -> Tensor {
    let c = x.shape()[1];
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let s = t.constant(Tensor::full(&[c], scale));
    let b = t.constant(Tensor::full(&[c], shift));
    let (y, stats) = t.batchnorm(xv, s, b, BnMode::Train).unwrap();
    assert!(stats.is_some());
    t.value(y).clone()
}

#[test]
fn bn_constant_channel_yields_shift() {
    let x = Tensor::full(&[2, 1, 3, 3], 4.2);
    let y = bn_train(&x, 1.7, 0.25);
    assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn bn_train_zero_mean_and_matches_two_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[3, 4, 5, 5], &mut rng).map(|v| 3.0 * v + 1.0);
    let y = bn_train(&x, 1.0, 0.0);
    let (b, c, h, w) = y.dims4().unwrap();
    for ch in 0..c {
        let mut s = 0.0;
        for n in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    s += y.at4(n, ch, yy, xx);
                }
            }
        }
        assert!((s / (b * h * w) as f64).abs() < 1e-10);
    }
    assert!(y.max_abs_diff(&two_pass_bn(&x)) < 1e-10);
}

#[test]
fn bn_eval_uses_running_stats_and_checks_channels() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 2, 1, 1], 3.0));
    let s = t.constant(Tensor::full(&[2], 2.0));
    let b = t.constant(Tensor::full(&[2], 1.0));
    let (y, stats) = t
        .batchnorm(x, s, b, BnMode::Eval { mean: &[1.0, 3.0], var: &[4.0 - BN_EPS, 1.0 - BN_EPS] })
        .unwrap();
    assert!(stats.is_none());
    let v = t.value(y).data();
    assert!((v[0] - 3.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    let bad = t.constant(Tensor::full(&[3], 1.0));
    assert!(t.batchnorm(x, bad, b, BnMode::Train).is_err());
}

#[test]
fn relu_and_add_and_concat() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![2], vec![-3.0, 2.0]).unwrap());
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 2.0]);
    let a = t.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let b = t.constant(Tensor::zeros(&[1, 3, 2, 2]));
    assert!(t.add(a, b).is_err());
    let c = t.concat(&[a, b]).unwrap();
    assert_eq!(t.value(c).shape(), &[1, 5, 2, 2]);
    let d = t.constant(Tensor::zeros(&[1, 3, 2, 3]));
    assert!(t.concat(&[a, d]).is_err());
}

#[test]
fn concat_backward_splits_to_operand_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut t = Tape::new();
    let a = t.leaf(rand_tensor(&[2, 2, 3, 3], &mut rng), true);
    let b = t.leaf(rand_tensor(&[2, 5, 3, 3], &mut rng), true);
    let c = t.concat(&[a, b]).unwrap();
    let seed = rand_tensor(t.value(c).shape(), &mut rng);
    t.backward_seeded(c, &seed).unwrap();
    let (ga, gb) = (t.grad(a), t.grad(b));
    assert_eq!(ga.shape(), &[2, 2, 3, 3]);
    assert_eq!(gb.shape(), &[2, 5, 3, 3]);
    // batch 1, channel 1 of `b` sits at channel 3 of the concatenation.
    assert_eq!(gb.at4(1, 1, 2, 0), seed.at4(1, 3, 2, 0));
    assert_eq!(ga.at4(1, 1, 0, 2), seed.at4(1, 1, 0, 2));
}

#[test]
fn cross_entropy_symmetric_logits_is_ln2() {
    for label in [0i8, 1] {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let l = t.softmax_ce(z, &[label], &[1.0]).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
    let mut t = Tape::new();
    let z = t.leaf(Tensor::full(&[1, 4, 2, 2], 0.3), true);
    let l = t.softmax_ce(z, &[IGNORE; 8], &[1.0; 8]).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
    t.backward(l).unwrap();
    assert!(t.grad(z).data().iter().all(|&g| g == 0.0));
}

#[test]
fn smooth_l1_piecewise_values() {
    // 0.5·0.5² = 0.125 in the quadratic zone; 2 − 0.5 = 1.5 in the linear zone.
    for (d, want) in [(0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)] {
        let mut t = Tape::new();
        let p = t.constant(Tensor::scalar(d));
        let l = t.smooth_l1(p, &Tensor::scalar(0.0), &[1.0], 1.0).unwrap();
        assert!((t.value(l).item() - want).abs() < 1e-15);
    }
}

#[test]
fn sum_gradient_is_ones_and_detached_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut t = Tape::new();
    let x = t.leaf(rand_tensor(&[3, 4], &mut rng), true);
    let detached = t.leaf(rand_tensor(&[2], &mut rng), true);
    let _unused = t.scale(detached, 3.0);
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert!(t.grad(x).data().iter().all(|&g| g == 1.0));
    assert!(t.grad(detached).data().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2]), true);
    assert!(t.backward(x).is_err());
}

#[test]
fn bilinear_constant_and_ramp() {
    let c = resize_bilinear(&[2.5; 4], 1, 2, 2, 4, 4);
    assert!(c.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    // Ramp 0,1 along x: half-pixel sample positions -0.25, 0.25, 0.75, 1.25 clamp to [0,1].
    let r = resize_bilinear(&[0.0, 1.0, 0.0, 1.0], 1, 2, 2, 4, 4);
    for row in r.chunks(4) {
        assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
    }
}

#[test]
fn max_pool_routes_gradient_to_argmax() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap(), true);
    let p = t.max_pool2(x).unwrap();
    assert_eq!(t.value(p).data(), &[5.0]);
    let s = t.sum(p);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn graph_binds_params_once_and_reports_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.add_conv("p1.c", 1, 2, 1, 3, &mut rng).unwrap();
    let mut g = Graph::new(&store, true);
    let x = g.tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let a = g.conv(x, "p1.c", 1, 1).unwrap();
    let b = g.conv(x, "p1.c", 1, 1).unwrap();
    let s = g.tape.add(a, b).unwrap();
    let l = g.tape.sum(s);
    g.tape.backward(l).unwrap();
    let grads = g.param_grads();
    assert_eq!(grads.0.len(), 2);
    // Bias gradient: two uses × 16 output pixels.
    assert_eq!(grads.get("p1.c.b").unwrap().data(), &[32.0, 32.0]);
}
