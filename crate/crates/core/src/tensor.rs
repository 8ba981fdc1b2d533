//! Dense kernels over batched feature maps.
//!
//! Every activation is a rank-4 array laid out as (batch, channels, height,
//! width). Convolutions are stride 1 with "same" zero padding, which is the
//! only form the network uses.

use ndarray::{s, Array2, Array4, ArrayView2, Axis, Zip};

use crate::error::{shape_err, Result};

/// Batched feature map, (batch, channels, height, width).
pub type Tensor = Array4<f64>;

/// Expand one sample's (C, H, W) block into a (C·k·k, H·W) patch matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x_lo].fill(0.0);
                    drow[x_hi..].fill(0.0);
                    let s_lo = (x_lo as isize + dx) as usize;
                    let s_hi = (x_hi as isize + dx) as usize;
                    drow[x_lo..x_hi].copy_from_slice(&srow[s_lo..s_hi]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto (C, H, W).
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w..(y + 1) * w];
                    let s_lo = (x_lo as isize + dx) as usize;
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (p, v) in prow[s_lo..s_lo + (x_hi - x_lo)].iter_mut().zip(&srow[x_lo..x_hi]) {
                        *p += *v;
                    }
                }
            }
        }
    }
}

fn check_conv(x: &Tensor, w: &Tensor) -> Result<usize> {
    let (_, cin, _, _) = x.dim();
    let (_, wcin, kh, kw) = w.dim();
    if wcin != cin {
        return shape_err(format!("conv expects {wcin} input channels, got {cin}"));
    }
    if kh != kw || kh % 2 == 0 {
        return shape_err(format!("conv kernel must be square and odd, got {kh}x{kw}"));
    }
    Ok(kh)
}

fn weight_matrix(w: &Tensor) -> ArrayView2<'_, f64> {
    let (cout, cin, k, _) = w.dim();
    w.view().into_shape_with_order((cout, cin * k * k)).expect("contiguous weights")
}

/// Below this many output columns the product is done with direct dot
/// products; packing for the blocked kernel costs more than it saves.
const NARROW_COLS: usize = 16;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a · b` for a row-major `a` (m × k) and `b` (k × n).
fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    if n >= NARROW_COLS {
        return a.dot(&b);
    }
    let a = a.as_standard_layout();
    let bt = b.t().as_standard_layout().into_owned();
    let (asl, bsl) = (a.as_slice().expect("standard layout"), bt.as_slice().expect("standard layout"));
    Array2::from_shape_fn((m, n), |(i, j)| dot(&asl[i * k..(i + 1) * k], &bsl[j * k..(j + 1) * k]))
}

/// Stride-1 convolution with zero "same" padding and optional per-channel bias.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let k = check_conv(x, w)?;
    let (n, cin, h, wd) = x.dim();
    let cout = w.dim().0;
    let hw = h * wd;
    let wm = weight_matrix(w);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Tensor::zeros((n, cout, h, wd));
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; cin * k * k * hw] };
    for b in 0..n {
        let sample = &xs[b * cin * hw..(b + 1) * cin * hw];
        let y = if k == 1 {
            let xm = ArrayView2::from_shape((cin, hw), sample).expect("sample view");
            matmul(wm, xm)
        } else {
            im2col(sample, cin, h, wd, k, &mut cols);
            let cm = ArrayView2::from_shape((cin * k * k, hw), &cols).expect("cols view");
            matmul(wm, cm)
        };
        let mut ob = out.index_axis_mut(Axis(0), b);
        let mut ob = ob.view_mut().into_shape_with_order((cout, hw)).expect("contiguous output");
        ob.assign(&y);
        if let Some(bias) = bias {
            for (mut row, bv) in ob.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                row += *bv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: (input grad if requested, weight grad, bias grad).
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, k, _) = w.dim();
    let hw = h * wd;
    let ckk = cin * k * k;
    let wm = weight_matrix(w);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let mut dw = Array2::<f64>::zeros((cout, ckk));
    let mut db = Tensor::zeros((1, cout, 1, 1));
    let mut dx = need_dx.then(|| Tensor::zeros((n, cin, h, wd)));
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
    for b in 0..n {
        let sample = &xs[b * cin * hw..(b + 1) * cin * hw];
        let g = ArrayView2::from_shape((cout, hw), &dys[b * cout * hw..(b + 1) * cout * hw])
            .expect("grad view");
        for (o, row) in g.axis_iter(Axis(0)).enumerate() {
            db[[0, o, 0, 0]] += row.sum();
        }
        if k == 1 {
            let xm = ArrayView2::from_shape((cin, hw), sample).expect("sample view");
            ndarray::linalg::general_mat_mul(1.0, &g, &xm.t(), 1.0, &mut dw);
        } else {
            im2col(sample, cin, h, wd, k, &mut cols);
            let cm = ArrayView2::from_shape((ckk, hw), &cols).expect("cols view");
            ndarray::linalg::general_mat_mul(1.0, &g, &cm.t(), 1.0, &mut dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dcols = wm.t().dot(&g);
            let mut db_ = dx.index_axis_mut(Axis(0), b);
            let dslice = db_.as_slice_mut().expect("standard layout");
            if k == 1 {
                for (d, v) in dslice.iter_mut().zip(dcols.iter()) {
                    *d += *v;
                }
            } else {
                let dcols = dcols.as_standard_layout();
                col2im(dcols.as_slice().expect("standard"), cin, h, wd, k, dslice);
            }
        }
    }
    let dw = dw.into_shape_with_order((cout, cin, k, k)).expect("weight grad shape");
    (dx, dw, db)
}

/// Source taps for 1-D bilinear resampling with half-pixel centers.
fn interp_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every plane to (out_h, out_w).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = interp_taps(h, out_h);
    let tx = interp_taps(w, out_w);
    let mut out = Tensor::zeros((n, c, out_h, out_w));
    for b in 0..n {
        for ch in 0..c {
            let src = x.slice(s![b, ch, .., ..]);
            let mut dst = out.slice_mut(s![b, ch, .., ..]);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = src[[y0, x0]] * (1.0 - lx) + src[[y0, x1]] * lx;
                    let bot = src[[y1, x0]] * (1.0 - lx) + src[[y1, x1]] * lx;
                    dst[[oy, ox]] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (n, c, oh, ow) = dy.dim();
    if (in_h, in_w) == (oh, ow) {
        return dy.clone();
    }
    let ty = interp_taps(in_h, oh);
    let tx = interp_taps(in_w, ow);
    let mut dx = Tensor::zeros((n, c, in_h, in_w));
    for b in 0..n {
        for ch in 0..c {
            let g = dy.slice(s![b, ch, .., ..]);
            let mut d = dx.slice_mut(s![b, ch, .., ..]);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let v = g[[oy, ox]];
                    d[[y0, x0]] += v * (1.0 - ly) * (1.0 - lx);
                    d[[y0, x1]] += v * (1.0 - ly) * lx;
                    d[[y1, x0]] += v * ly * (1.0 - lx);
                    d[[y1, x1]] += v * ly * lx;
                }
            }
        }
    }
    dx
}

/// 2×2 stride-2 max pooling. Returns the pooled map and the flat argmax index
/// (within the input plane) of every output cell; ties keep the first cell.
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("max pool needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros((n, c, oh, ow));
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let src = x.slice(s![b, ch, .., ..]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let p = (2 * oy + dy, 2 * ox + dx);
                        if src[p] > src[best] {
                            best = p;
                        }
                    }
                    out[[b, ch, oy, ox]] = src[best];
                    arg.push(best.0 * w + best.1);
                }
            }
        }
    }
    Ok((out, arg))
}

/// Mirror padding without repeating the edge sample (…, 2, 1, |0, 1, 2, …).
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dim();
    if pad >= h || pad >= w {
        return shape_err(format!("reflect padding {pad} needs spatial dims above it, got {h}x{w}"));
    }
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let i = if i < 0 { -i } else { i };
        (if i >= len { 2 * (len - 1) - i } else { i }) as usize
    };
    Ok(Tensor::from_shape_fn((n, c, h + 2 * pad, w + 2 * pad), |(b, ch, y, xx)| {
        x[[b, ch, reflect(y as isize - pad as isize, h), reflect(xx as isize - pad as isize, w)]]
    }))
}

/// Reduce a broadcast gradient back to `shape` by summing stretched axes.
pub fn sum_to_shape(g: &Tensor, shape: [usize; 4]) -> Tensor {
    let mut out = g.clone();
    for ax in 0..4 {
        if shape[ax] == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

/// Shape both operands broadcast to, if compatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Elementwise binary op with broadcasting over size-1 axes.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let av = a.broadcast(shape).expect("checked broadcast");
    let bv = b.broadcast(shape).expect("checked broadcast");
    let mut out = Tensor::zeros(shape);
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor) -> Tensor {
        let (n, cin, h, wd) = x.dim();
        let (cout, _, k, _) = w.dim();
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros((n, cout, h, wd));
        for b in 0..n {
            for o in 0..cout {
                for y in 0..h as isize {
                    for xx in 0..wd as isize {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for ky in 0..k as isize {
                                for kx in 0..k as isize {
                                    let sy = y + ky - pad;
                                    let sx = xx + kx - pad;
                                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < wd as isize {
                                        acc += x[[b, c, sy as usize, sx as usize]]
                                            * w[[o, c, ky as usize, kx as usize]];
                                    }
                                }
                            }
                        }
                        out[[b, o, y as usize, xx as usize]] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: (usize, usize, usize, usize), k: f64) -> Tensor {
        let mut i = 0.0;
        Tensor::from_shape_fn(shape, |_| {
            i += 1.0;
            (i * k).sin()
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        for k in [1, 3, 5] {
            let x = ramp((2, 3, 6, 5), 0.37);
            let w = ramp((4, 3, k, k), 0.91);
            let got = conv2d(&x, &w, None).unwrap();
            let want = naive_conv(&x, &w);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> and = <w, dW>
        let x = ramp((2, 3, 5, 4), 0.2);
        let w = ramp((2, 3, 3, 3), 0.7);
        let g = ramp((2, 2, 5, 4), 1.3);
        let y = conv2d(&x, &w, None).unwrap();
        let lhs: f64 = (&y * &g).sum();
        let (dx, dw, _) = conv2d_backward(&x, &w, &g, true);
        assert!((lhs - (&x * &dx.unwrap()).sum()).abs() < 1e-10);
        assert!((lhs - (&w * &dw).sum()).abs() < 1e-10);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = ramp((1, 2, 4, 6), 0.3);
        let g = ramp((1, 2, 9, 5), 0.8);
        let y = resize_bilinear(&x, 9, 5);
        let dx = resize_bilinear_backward(&g, 4, 6);
        assert!(((&y * &g).sum() - (&x * &dx).sum()).abs() < 1e-12);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let x = Tensor::from_elem((1, 1, 3, 5), 2.5);
        let y = resize_bilinear(&x, 8, 10);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn max_pool_rejects_odd() {
        assert!(max_pool2(&Tensor::zeros((1, 1, 3, 4))).is_err());
    }
}
