//! Forward and backward kernels for the ops recorded on the tape.

use crate::tensor::Tensor;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let n_out = g.oh * g.ow;
    let mut r = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[r * n_out..(r + 1) * n_out];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy as usize >= g.h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix >= 0 && (ix as usize) < g.w {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n_out = g.oh * g.ow;
    let mut r = 0;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &col[r * n_out..(r + 1) * n_out];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, row-major, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be rank 4");
    let (cout, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], cin, "conv weight expects {} input channels, got {cin}", ws[1]);
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let n_out = g.oh * g.ow;
    let mut out = vec![0.0; n * cout * n_out];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.rows() * n_out]
    };
    let in_sz = cin * h * wd;
    for bi in 0..n {
        let xs = &x.data()[bi * in_sz..(bi + 1) * in_sz];
        let ys = &mut out[bi * cout * n_out..(bi + 1) * cout * n_out];
        if let Some(b) = b {
            for (co, chunk) in ys.chunks_mut(n_out).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(cout, g.rows(), n_out, w.data(), false, xs, false, beta, ys);
        } else {
            im2col(xs, &g, &mut col);
            gemm(cout, g.rows(), n_out, w.data(), false, &col, false, beta, ys);
        }
    }
    Tensor::new(vec![n, cout, g.oh, g.ow], out)
}

/// Returns `(dx, dw, db)`; each is computed only when requested.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4();
    let ws = w.shape();
    let (cout, k) = (ws[0], ws[2]);
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let n_out = g.oh * g.ow;
    let rows = g.rows();
    let in_sz = cin * h * wd;

    let mut dx = need.0.then(|| vec![0.0; x.numel()]);
    let mut dw = need.1.then(|| vec![0.0; w.numel()]);
    let mut db = need.2.then(|| vec![0.0; cout]);
    let mut col = vec![0.0; if need.1 && !g.is_pointwise() { rows * n_out } else { 0 }];
    let mut dcol = vec![0.0; if need.0 && !g.is_pointwise() { rows * n_out } else { 0 }];

    for bi in 0..n {
        let xs = &x.data()[bi * in_sz..(bi + 1) * in_sz];
        let dys = &dy.data()[bi * cout * n_out..(bi + 1) * cout * n_out];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dys.chunks(n_out).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let cols: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            gemm(cout, n_out, rows, dys, false, cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[bi * in_sz..(bi + 1) * in_sz];
            if g.is_pointwise() {
                gemm(rows, cout, n_out, w.data(), true, dys, false, 1.0, dxs);
            } else {
                gemm(rows, cout, n_out, w.data(), true, dys, false, 0.0, &mut dcol);
                col2im(&dcol, &g, dxs);
            }
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::new(w.shape().to_vec(), d)),
        db.map(|d| Tensor::new(vec![cout], d)),
    )
}

/// Per-axis linear interpolation taps (half-pixel centers, edge clamped).
#[derive(Clone, Debug)]
pub struct Taps {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub w1: Vec<f64>,
}

pub fn linear_taps(n_in: usize, n_out: usize) -> Taps {
    let scale = n_in as f64 / n_out as f64;
    let mut t = Taps {
        i0: Vec::with_capacity(n_out),
        i1: Vec::with_capacity(n_out),
        w1: Vec::with_capacity(n_out),
    };
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        t.i0.push(i0);
        t.i1.push(i1);
        t.w1.push(src - i0 as f64);
    }
    t
}

pub fn resize_bilinear_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut rowbuf = vec![0.0; ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, wy) = (ty.i0[oy], ty.i1[oy], ty.w1[oy]);
            for (ox, r) in rowbuf.iter_mut().enumerate() {
                let (x0, x1, wx) = (tx.i0[ox], tx.i1[ox], tx.w1[ox]);
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                *r = top * (1.0 - wy) + bot * wy;
            }
            dst[oy * ow..(oy + 1) * ow].copy_from_slice(&rowbuf);
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn resize_bilinear_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, oh, ow) = dy.dims4();
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, wy) = (ty.i0[oy], ty.i1[oy], ty.w1[oy]);
            for ox in 0..ow {
                let (x0, x1, wx) = (tx.i0[ox], tx.i1[ox], tx.w1[ox]);
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                d[y0 * w + x1] += v * (1.0 - wy) * wx;
                d[y1 * w + x0] += v * wy * (1.0 - wx);
                d[y1 * w + x1] += v * wy * wx;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

pub fn avg_pool_forward(x: &Tensor, kh: usize, kw: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(h % kh == 0 && w % kw == 0, "avg_pool: {h}x{w} not divisible by {kh}x{kw}");
    let (oh, ow) = (h / kh, w / kw);
    let inv = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / kh) * ow + xx / kw] += src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool_backward(dy: &Tensor, kh: usize, kw: usize) -> Tensor {
    let (n, c, oh, ow) = dy.dims4();
    let (h, w) = (oh * kh, ow * kw);
    let inv = 1.0 / (kh * kw) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                d[y * w + xx] = g[(y / kh) * ow + xx / kw] * inv;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

/// Softmax over the channel axis of an `[N, C, H, W]` tensor.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    let mut buf = vec![0.0; c];
    for bi in 0..n {
        let base = bi * c * hw;
        for i in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for (ch, b) in buf.iter_mut().enumerate() {
                *b = xd[base + ch * hw + i];
                m = m.max(*b);
            }
            let mut s = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - m).exp();
                s += *b;
            }
            for (ch, b) in buf.iter().enumerate() {
                out[base + ch * hw + i] = b / s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_channels_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let (n, c, h, w) = y.dims4();
    let hw = h * w;
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![0.0; y.numel()];
    for bi in 0..n {
        let base = bi * c * hw;
        for i in 0..hw {
            let mut dot = 0.0;
            for ch in 0..c {
                dot += yd[base + ch * hw + i] * gd[base + ch * hw + i];
            }
            for ch in 0..c {
                let j = base + ch * hw + i;
                dx[j] = yd[j] * (gd[j] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

/// Concatenate rank-4 tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (n, _, h, w) = parts[0].dims4();
    let ctot: usize = parts.iter().map(|t| t.dims4().1).sum();
    let mut out = Vec::with_capacity(n * ctot * h * w);
    for bi in 0..n {
        for t in parts {
            let (tn, c, th, tw) = t.dims4();
            assert!(tn == n && th == h && tw == w, "concat shape mismatch");
            let sz = c * h * w;
            out.extend_from_slice(&t.data()[bi * sz..(bi + 1) * sz]);
        }
    }
    Tensor::new(vec![n, ctot, h, w], out)
}

pub fn split_channels(dy: &Tensor, sizes: &[usize]) -> Vec<Tensor> {
    let (n, _, h, w) = dy.dims4();
    let ctot: usize = sizes.iter().sum();
    let mut parts: Vec<Vec<f64>> = sizes.iter().map(|c| Vec::with_capacity(n * c * h * w)).collect();
    for bi in 0..n {
        let mut off = bi * ctot * h * w;
        for (p, &c) in parts.iter_mut().zip(sizes) {
            p.extend_from_slice(&dy.data()[off..off + c * h * w]);
            off += c * h * w;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(p, &c)| Tensor::new(vec![n, c, h, w], p))
        .collect()
}

/// Forward difference along width (`axis = 3`) or height (`axis = 2`); zero in the last column/row.
pub fn diff_forward(x: &Tensor, axis: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for p in 0..n * c {
        let b = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = b + y * w + xx;
                out[i] = match axis {
                    3 if xx + 1 < w => xd[i + 1] - xd[i],
                    2 if y + 1 < h => xd[i + w] - xd[i],
                    _ => 0.0,
                };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn diff_backward(dy: &Tensor, axis: usize) -> Tensor {
    let (n, c, h, w) = dy.dims4();
    let g = dy.data();
    let mut dx = vec![0.0; dy.numel()];
    for p in 0..n * c {
        let b = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = b + y * w + xx;
                match axis {
                    3 if xx + 1 < w => {
                        dx[i + 1] += g[i];
                        dx[i] -= g[i];
                    }
                    2 if y + 1 < h => {
                        dx[i + w] += g[i];
                        dx[i] -= g[i];
                    }
                    _ => {}
                }
            }
        }
    }
    Tensor::new(dy.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let g = ConvGeom::new(cin, h, wd, k, stride, pad);
        let mut out = Tensor::zeros(&[n, cout, g.oh, g.ow]);
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at4(bi, ci, iy as usize, ix as usize)
                                            * w.data()[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out.set4(bi, co, oy, ox, s);
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)] {
            let x = pseudo(&[2, 3, 7, 6], 1);
            let w = pseudo(&[4, 3, k, k], 2);
            let b = pseudo(&[4], 3);
            let fast = conv2d_forward(&x, &w, Some(&b), stride, pad);
            let slow = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x = pseudo(&[1, 2, 5, 4], 9);
        let y = resize_bilinear_forward(&x, 5, 4);
        assert_eq!(x, y);
    }

    #[test]
    fn bilinear_from_single_pixel_broadcasts() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![0.3]);
        let y = resize_bilinear_forward(&x, 3, 5);
        assert!(y.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = pseudo(&[2, 5, 3, 3], 4).map(|v| v * 30.0);
        let y = softmax_channels(&x);
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let s: f64 = (0..5).map(|c| y.at4(bi, c, i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_split_inverse() {
        let a = pseudo(&[2, 2, 3, 3], 5);
        let b = pseudo(&[2, 3, 3, 3], 6);
        let c = concat_channels(&[&a, &b]);
        let parts = split_channels(&c, &[2, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
