//! Independent oracles shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use phasedet::autodiff::{BnMode, Tape, Var, IGNORE};
use phasedet::eval::{Detection, LayerKind, LayerShape};
use phasedet::targets::BBox;
use phasedet::{Result, Tensor};
use rand::Rng;

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Six nested loops, zero padding.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
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

pub type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One layer under finite-difference test: input shapes and how to build
/// its output from leaves of those shapes.
pub struct FdCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Builder,
}

const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const FD_FLOOR: f64 = 1e-4;
const COORDS_PER_INPUT: usize = 4;

fn projected(case: &FdCase, inputs: &[Tensor], r: &Tensor) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), false)).collect();
    let out = (case.build)(&mut t, &vars).unwrap();
    t.value(out).dot(r)
}

/// Largest relative error between the reverse-mode gradient of `⟨out, r⟩`
/// and its central difference, over `trials` fresh random instances.
pub fn fd_check(case: &FdCase, trials: usize, rng: &mut impl Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inputs: Vec<Tensor> = case.shapes.iter().map(|s| rand_tensor(s, rng)).collect();
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let out = (case.build)(&mut t, &vars).unwrap();
        let r = rand_tensor(t.value(out).shape(), rng);
        t.backward_seeded(out, &r).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let g = t.grad(*v);
            for _ in 0..COORDS_PER_INPUT {
                let j = rng.gen_range(0..inputs[i].numel());
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= FD_STEP;
                let fd = (projected(case, &plus, &r) - projected(case, &minus, &r)) / (2.0 * FD_STEP);
                let a = g.data()[j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR);
                worst = worst.max(err);
            }
        }
    }
    worst
}

/// Every differentiable layer type on the tape.
pub fn fd_cases() -> Vec<FdCase> {
    let labels: Vec<i8> = (0..2 * 3 * 3 * 2).map(|i| [0, 1, IGNORE, 1, 0][i % 5]).collect();
    let weights: Vec<f64> = (0..labels.len()).map(|i| 0.5 + (i % 3) as f64).collect();
    let target = Tensor::new(vec![2, 12], (0..24).map(|i| (i as f64 - 12.0) * 0.15).collect()).unwrap();
    let sl_w: Vec<f64> = (0..24).map(|i| (i % 4) as f64 * 0.5).collect();
    vec![
        FdCase {
            name: "conv3x3",
            shapes: vec![vec![2, 3, 6, 5], vec![4, 3, 3, 3], vec![4]],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
        },
        FdCase {
            name: "conv3x3_stride2",
            shapes: vec![vec![1, 2, 8, 6], vec![3, 2, 3, 3], vec![3]],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
        },
        FdCase {
            name: "conv1x1",
            shapes: vec![vec![2, 4, 3, 3], vec![2, 4, 1, 1], vec![2]],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 0)),
        },
        FdCase {
            name: "tconv4x4",
            shapes: vec![vec![2, 3, 3, 4], vec![3, 2, 4, 4], vec![2]],
            build: Box::new(|t, v| t.tconv2d(v[0], v[1], v[2], 1)),
        },
        FdCase {
            name: "batchnorm_train",
            shapes: vec![vec![2, 3, 4, 4], vec![3], vec![3]],
            build: Box::new(|t, v| Ok(t.batchnorm(v[0], v[1], v[2], BnMode::Train)?.0)),
        },
        FdCase {
            name: "batchnorm_eval",
            shapes: vec![vec![2, 3, 4, 4], vec![3], vec![3]],
            build: Box::new(|t, v| {
                let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
                Ok(t.batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })?.0)
            }),
        },
        FdCase { name: "relu", shapes: vec![vec![2, 3, 4, 4]], build: Box::new(|t, v| Ok(t.relu(v[0]))) },
        FdCase {
            name: "add",
            shapes: vec![vec![1, 2, 3, 3], vec![1, 2, 3, 3]],
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        FdCase {
            name: "concat",
            shapes: vec![vec![2, 2, 3, 3], vec![2, 3, 3, 3]],
            build: Box::new(|t, v| t.concat(&[v[0], v[1]])),
        },
        FdCase { name: "max_pool2", shapes: vec![vec![2, 2, 6, 4]], build: Box::new(|t, v| t.max_pool2(v[0])) },
        FdCase {
            name: "resize_bilinear",
            shapes: vec![vec![1, 2, 3, 5]],
            build: Box::new(|t, v| t.resize_bilinear(v[0], 6, 10)),
        },
        FdCase {
            name: "linear",
            shapes: vec![vec![3, 5], vec![4, 5], vec![4]],
            build: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
        },
        FdCase {
            name: "reshape",
            shapes: vec![vec![2, 3, 2, 2]],
            build: Box::new(|t, v| t.reshape(v[0], &[2, 12])),
        },
        FdCase { name: "sum", shapes: vec![vec![2, 3, 2]], build: Box::new(|t, v| Ok(t.sum(v[0]))) },
        FdCase { name: "scale", shapes: vec![vec![2, 5]], build: Box::new(|t, v| Ok(t.scale(v[0], -1.7))) },
        FdCase {
            name: "softmax_ce",
            shapes: vec![vec![2, 6, 3, 2]],
            build: Box::new(move |t, v| t.softmax_ce(v[0], &labels, &weights)),
        },
        FdCase {
            name: "smooth_l1",
            shapes: vec![vec![2, 12]],
            build: Box::new(move |t, v| {
                // Spread predictions across both sides of the |d| = 1 transition.
                let p = t.scale(v[0], 3.0);
                t.smooth_l1(p, &target, &sl_w, 2.5)
            }),
        },
    ]
}

/// O(n²) NMS reference: full IoU matrix, then a suppression sweep.
pub fn brute_nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| pixel_free_iou(&dets[i].bbox, &dets[j].bbox)).collect()).collect();
    let mut dead = vec![false; n];
    let mut out = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if dead[i] {
            continue;
        }
        out.push(dets[i].clone());
        for &j in &order[pos + 1..] {
            if m[i][j] > threshold {
                dead[j] = true;
            }
        }
    }
    out
}

/// Intersection-over-union written from the min/max definition.
pub fn pixel_free_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU by counting `1/res`-sized cells whose centers fall in each box.
pub fn pixel_iou(a: &BBox, b: &BBox, res: usize) -> f64 {
    let lo = a.x1.min(b.x1).min(a.y1).min(b.y1).floor() as i64;
    let hi = a.x2.max(b.x2).max(a.y2).max(b.y2).ceil() as i64;
    let (mut inter, mut union) = (0u64, 0u64);
    let step = 1.0 / res as f64;
    for yi in lo * res as i64..hi * res as i64 {
        let y = (yi as f64 + 0.5) * step;
        for xi in lo * res as i64..hi * res as i64 {
            let x = (xi as f64 + 0.5) * step;
            let ina = a.contains_point(x, y);
            let inb = b.contains_point(x, y);
            inter += (ina && inb) as u64;
            union += (ina || inb) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Execute the layer on random data with a counting multiplier. Padding
/// taps multiply a stored zero, so they count.
pub fn instrumented_macs(l: &LayerShape, rng: &mut impl Rng) -> u64 {
    let mut count = 0u64;
    let mut mul = |a: f64, b: f64| {
        count += 1;
        a * b
    };
    let x = rand_tensor(&[l.in_c, l.in_h, l.in_w], rng);
    let at = |c: usize, y: isize, xx: isize| {
        if y < 0 || xx < 0 || y as usize >= l.in_h || xx as usize >= l.in_w {
            0.0
        } else {
            x.data()[(c * l.in_h + y as usize) * l.in_w + xx as usize]
        }
    };
    let mut sink = 0.0;
    match l.kind {
        LayerKind::Conv { stride } => {
            let w = rand_tensor(&[l.out_c, l.in_c, l.k, l.k], rng);
            let pad = (l.k / 2) as isize;
            for oc in 0..l.out_c {
                for oy in 0..l.out_h {
                    for ox in 0..l.out_w {
                        for ic in 0..l.in_c {
                            for ky in 0..l.k {
                                for kx in 0..l.k {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    let ix = (ox * stride + kx) as isize - pad;
                                    sink += mul(at(ic, iy, ix), w.at4(oc, ic, ky, kx));
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerKind::TConv => {
            // Scatter form: every input pixel stamps the whole kernel.
            let w = rand_tensor(&[l.in_c, l.out_c, l.k, l.k], rng);
            for ic in 0..l.in_c {
                for iy in 0..l.in_h {
                    for ix in 0..l.in_w {
                        for oc in 0..l.out_c {
                            for ky in 0..l.k {
                                for kx in 0..l.k {
                                    sink += mul(at(ic, iy as isize, ix as isize), w.at4(ic, oc, ky, kx));
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerKind::Resize => {
            let (sy, sx) = (l.in_h as f64 / l.out_h as f64, l.in_w as f64 / l.out_w as f64);
            for c in 0..l.out_c {
                for oy in 0..l.out_h {
                    for ox in 0..l.out_w {
                        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
                        let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
                        let (y0, x0) = (fy.floor() as isize, fx.floor() as isize);
                        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                        sink += mul(at(c, y0, x0), (1.0 - dy) * (1.0 - dx))
                            + mul(at(c, y0, x0 + 1), (1.0 - dy) * dx)
                            + mul(at(c, y0 + 1, x0), dy * (1.0 - dx))
                            + mul(at(c, y0 + 1, x0 + 1), dy * dx);
                    }
                }
            }
        }
    }
    std::hint::black_box(sink);
    count
}
