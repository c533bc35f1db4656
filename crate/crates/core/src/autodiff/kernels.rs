//! Forward/backward kernels for the layer set. All buffers are NCHW row-major.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// `a` is stored `m×k` (or `k×m` if `ta`), `b` is stored `k×n` (or `n×k` if `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index reachable through these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a strided window, or `None` if the kernel does not fit.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold one image `C×H×W` into a `(C·kh·kw) × (oh·ow)` column matrix.
pub(crate) fn im2col(img: &[f64], g: &Window, col: &mut [f64]) {
    let cols = g.cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate a column matrix back into an image.
pub(crate) fn col2im(col: &[f64], g: &Window, img: &mut [f64]) {
    let cols = g.cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution shapes: input `B×C×H×W`, kernel `O×C×kh×kw`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub out_channels: usize,
    pub win: Window,
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let g = &d.win;
    let (rows, cols) = (g.rows(), g.cols());
    let in_sz = g.channels * g.height * g.width;
    let out_sz = d.out_channels * cols;
    let mut out = vec![0.0; d.batch * out_sz];
    let mut col = vec![0.0; rows * cols];
    for b in 0..d.batch {
        let o = &mut out[b * out_sz..(b + 1) * out_sz];
        for (oc, chunk) in o.chunks_mut(cols).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[oc]);
        }
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut col);
        gemm(d.out_channels, rows, cols, 1.0, w, false, &col, false, 1.0, o);
    }
    out
}

/// Accumulates gradients for input, kernel and bias of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    d: &ConvDims,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let g = &d.win;
    let (rows, cols) = (g.rows(), g.cols());
    let in_sz = g.channels * g.height * g.width;
    let out_sz = d.out_channels * cols;
    if let Some(db) = dbias {
        for b in 0..d.batch {
            for (oc, chunk) in dy[b * out_sz..(b + 1) * out_sz].chunks(cols).enumerate() {
                db[oc] += chunk.iter().sum::<f64>();
            }
        }
    }
    let mut col = vec![0.0; rows * cols];
    if let Some(dw) = dw {
        for b in 0..d.batch {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut col);
            gemm(d.out_channels, cols, rows, 1.0, &dy[b * out_sz..], false, &col, true, 1.0, dw);
        }
    }
    if let Some(dx) = dx {
        for b in 0..d.batch {
            gemm(rows, d.out_channels, cols, 1.0, w, true, &dy[b * out_sz..], false, 0.0, &mut col);
            col2im(&col, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
}

/// Transposed-convolution shapes: input `B×Cin×H×W`, kernel `Cin×Cout×k×k`.
/// `win` describes the adjoint convolution mapping the output (`Cout×Ho×Wo`)
/// back onto the input grid (`H×W`).
#[derive(Clone, Copy, Debug)]
pub(crate) struct TConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub win: Window,
}

pub(crate) fn tconv2d_forward(x: &[f64], w: &[f64], bias: &[f64], d: &TConvDims) -> Vec<f64> {
    let g = &d.win;
    let (rows, cols) = (g.rows(), g.cols());
    let in_sz = d.in_channels * cols;
    let out_plane = g.height * g.width;
    let out_sz = g.channels * out_plane;
    let mut out = vec![0.0; d.batch * out_sz];
    let mut col = vec![0.0; rows * cols];
    for b in 0..d.batch {
        gemm(rows, d.in_channels, cols, 1.0, w, true, &x[b * in_sz..], false, 0.0, &mut col);
        let o = &mut out[b * out_sz..(b + 1) * out_sz];
        for (oc, chunk) in o.chunks_mut(out_plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[oc]);
        }
        col2im(&col, g, o);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn tconv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    d: &TConvDims,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let g = &d.win;
    let (rows, cols) = (g.rows(), g.cols());
    let in_sz = d.in_channels * cols;
    let out_plane = g.height * g.width;
    let out_sz = g.channels * out_plane;
    if let Some(db) = dbias {
        for b in 0..d.batch {
            for (oc, chunk) in dy[b * out_sz..(b + 1) * out_sz].chunks(out_plane).enumerate() {
                db[oc] += chunk.iter().sum::<f64>();
            }
        }
    }
    let mut col = vec![0.0; rows * cols];
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..d.batch {
        im2col(&dy[b * out_sz..(b + 1) * out_sz], g, &mut col);
        if let Some(dx) = dx.as_deref_mut() {
            gemm(d.in_channels, rows, cols, 1.0, w, false, &col, false, 1.0, &mut dx[b * in_sz..]);
        }
        if let Some(dw) = dw.as_deref_mut() {
            gemm(d.in_channels, cols, rows, 1.0, &x[b * in_sz..], false, &col, true, 1.0, dw);
        }
    }
}

/// 2×2 stride-2 max pooling. Returns the pooled values and flat argmax indices.
pub(crate) fn max_pool2(x: &[f64], b: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

/// Source taps for half-pixel bilinear resampling along one axis.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn resize_bilinear(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[(p * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn resize_bilinear_backward(
    dy: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = dy[(p * oh + oy) * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

/// Per-channel mean and biased variance of a `B×C×H×W` buffer.
pub(crate) fn channel_moments(x: &[f64], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for bi in 0..b {
            v += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                .iter()
                .map(|&t| (t - m) * (t - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / n;
    }
    (mean, var)
}
