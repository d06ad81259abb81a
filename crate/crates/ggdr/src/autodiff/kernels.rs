//! Raw f64 tensor kernels backing the graph ops.
//!
//! Convolution is implemented as im2col + GEMM per sample. The three conv
//! kernels (forward, input-gradient, weight-gradient) form a closed family:
//! each one's adjoints are again members of the family, which is what makes
//! second-order gradients (needed by the R1 penalty) work.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix4, IxDyn};

pub type Tensor = ArrayD<f64>;

pub fn conv_out_size(in_size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (in_size + 2 * pad - kernel) / stride + 1
}

fn as_mat(t: &Tensor, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    t.view()
        .into_shape_with_order((rows, cols))
        .expect("tensor not contiguous for matrix view")
}

/// im2col for one sample: x [C,H,W] -> col [C*k*k, oh*ow]. Zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut Array2<f64>,
) {
    col.fill(0.0);
    let col_s = col.as_slice_mut().unwrap();
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_base = (c * h + iy as usize) * w;
                    let c_base = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col_s[c_base + ox] = x[x_base + ix as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add col [C*k*k, oh*ow] into gx [C,H,W].
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut [f64],
) {
    let col_s = col.as_slice().unwrap();
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_base = (c * h + iy as usize) * w;
                    let c_base = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[x_base + ix as usize] += col_s[c_base + ox];
                    }
                }
            }
        }
    }
}

/// y[n,o,:,:] = w * im2col(x[n]) for w [O,C,k,k], x [N,C,H,W].
pub fn conv2d_fwd(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, ci, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(c, ci, "conv channel mismatch");
    assert_eq!(ws[2], ws[3], "square kernels only");
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(wd, k, stride, pad);
    let wmat = as_mat(w, o, ci * k * k);
    let mut out = Tensor::zeros(IxDyn(&[n, o, oh, ow]));
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let mut out4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();

    if k == 1 && stride == 1 && pad == 0 {
        for i in 0..n {
            let xn = x4.index_axis(Axis(0), i);
            let xm = xn.into_shape_with_order((c, h * wd)).unwrap();
            let on = out4.index_axis_mut(Axis(0), i);
            let mut om: ArrayViewMut2<f64> = on.into_shape_with_order((o, oh * ow)).unwrap();
            general_mat_mul(1.0, &wmat, &xm, 0.0, &mut om);
        }
        return out;
    }

    let mut col = Array2::<f64>::zeros((c * k * k, oh * ow));
    for i in 0..n {
        let xn = x4.index_axis(Axis(0), i);
        im2col(
            xn.as_slice().unwrap(),
            c,
            h,
            wd,
            k,
            stride,
            pad,
            oh,
            ow,
            &mut col,
        );
        let on = out4.index_axis_mut(Axis(0), i);
        let mut om: ArrayViewMut2<f64> = on.into_shape_with_order((o, oh * ow)).unwrap();
        general_mat_mul(1.0, &wmat, &col.view(), 0.0, &mut om);
    }
    out
}

/// Gradient of conv2d_fwd w.r.t. its input: gx [N,C,in_h,in_w] from gy [N,O,oh,ow].
pub fn conv2d_dinput(
    gy: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Tensor {
    let gs = gy.shape();
    let ws = w.shape();
    let (n, o, oh, ow) = (gs[0], gs[1], gs[2], gs[3]);
    let (oo, c, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(o, oo, "conv dinput channel mismatch");
    let wmat = as_mat(w, o, c * k * k);
    let mut gx = Tensor::zeros(IxDyn(&[n, c, in_h, in_w]));
    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
    let mut gx4 = gx.view_mut().into_dimensionality::<Ix4>().unwrap();

    if k == 1 && stride == 1 && pad == 0 {
        for i in 0..n {
            let gn = gy4.index_axis(Axis(0), i);
            let gm = gn.into_shape_with_order((o, oh * ow)).unwrap();
            let xn = gx4.index_axis_mut(Axis(0), i);
            let mut xm: ArrayViewMut2<f64> = xn.into_shape_with_order((c, in_h * in_w)).unwrap();
            general_mat_mul(1.0, &wmat.t(), &gm, 0.0, &mut xm);
        }
        return gx;
    }

    let mut gcol = Array2::<f64>::zeros((c * k * k, oh * ow));
    for i in 0..n {
        let gn = gy4.index_axis(Axis(0), i);
        let gm = gn.into_shape_with_order((o, oh * ow)).unwrap();
        general_mat_mul(1.0, &wmat.t(), &gm, 0.0, &mut gcol);
        let mut xn = gx4.index_axis_mut(Axis(0), i);
        col2im_add(
            &gcol,
            c,
            in_h,
            in_w,
            k,
            stride,
            pad,
            oh,
            ow,
            xn.as_slice_mut().unwrap(),
        );
    }
    gx
}

/// Gradient of conv2d_fwd w.r.t. its weight: gw [O,C,k,k] from x and gy.
pub fn conv2d_dweight(x: &Tensor, gy: &Tensor, stride: usize, pad: usize, kernel: usize) -> Tensor {
    let xs = x.shape();
    let gs = gy.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (nn, o, oh, ow) = (gs[0], gs[1], gs[2], gs[3]);
    assert_eq!(n, nn, "conv dweight batch mismatch");
    let k = kernel;
    let mut gw = Tensor::zeros(IxDyn(&[o, c, k, k]));
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
    {
        let mut gwm: ArrayViewMut2<f64> = gw
            .view_mut()
            .into_shape_with_order((o, c * k * k))
            .unwrap();
        if k == 1 && stride == 1 && pad == 0 {
            for i in 0..n {
                let xn = x4.index_axis(Axis(0), i);
                let xm = xn.into_shape_with_order((c, h * w)).unwrap();
                let gn = gy4.index_axis(Axis(0), i);
                let gm = gn.into_shape_with_order((o, oh * ow)).unwrap();
                general_mat_mul(1.0, &gm, &xm.t(), 1.0, &mut gwm);
            }
        } else {
            let mut col = Array2::<f64>::zeros((c * k * k, oh * ow));
            for i in 0..n {
                let xn = x4.index_axis(Axis(0), i);
                im2col(
                    xn.as_slice().unwrap(),
                    c,
                    h,
                    w,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut col,
                );
                let gn = gy4.index_axis(Axis(0), i);
                let gm = gn.into_shape_with_order((o, oh * ow)).unwrap();
                general_mat_mul(1.0, &gm, &col.t(), 1.0, &mut gwm);
            }
        }
    }
    gw
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
    let xi = x.as_slice().unwrap();
    let oi = out.as_slice_mut().unwrap();
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * 4 * h * w;
        for i in 0..h {
            for j in 0..w {
                let v = xi[ib + i * w + j];
                let o0 = ob + (2 * i) * 2 * w + 2 * j;
                let o1 = ob + (2 * i + 1) * 2 * w + 2 * j;
                oi[o0] = v;
                oi[o0 + 1] = v;
                oi[o1] = v;
                oi[o1 + 1] = v;
            }
        }
    }
    out
}

/// 2x2 sum pooling; the adjoint of [`upsample_nearest2x`].
pub fn sum_pool2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "sum_pool2x needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(IxDyn(&[n, c, oh, ow]));
    let xi = x.as_slice().unwrap();
    let oi = out.as_slice_mut().unwrap();
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                let i0 = ib + (2 * i) * w + 2 * j;
                let i1 = ib + (2 * i + 1) * w + 2 * j;
                oi[ob + i * ow + j] = xi[i0] + xi[i0 + 1] + xi[i1] + xi[i1 + 1];
            }
        }
    }
    out
}

/// One bilinear tap: flattened source index and weight.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub idx: usize,
    pub w: f64,
}

/// Mirror an integer index into [0, n): symmetric reflection at the borders.
fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Bilinear sampling taps for an affine map from output pixel grid (out_h x out_w)
/// into a source grid (src_h x src_w). `mat` maps normalized output coords
/// (x, y) in [-1, 1] to normalized source coords: [a, b, c, d, e, f] meaning
/// x_src = a*x + b*y + c, y_src = d*x + e*y + f. Pixel centers sit at
/// (i + 0.5) / n scaled to [-1, 1]; positions landing exactly on a pixel
/// center are snapped so flips and 90-degree rotations stay exact.
pub fn affine_taps(
    mat: &[f64; 6],
    out_h: usize,
    out_w: usize,
    src_h: usize,
    src_w: usize,
) -> Vec<[Tap; 4]> {
    let mut taps = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let y = 2.0 * (i as f64 + 0.5) / out_h as f64 - 1.0;
        for j in 0..out_w {
            let x = 2.0 * (j as f64 + 0.5) / out_w as f64 - 1.0;
            let xs = mat[0] * x + mat[1] * y + mat[2];
            let ys = mat[3] * x + mat[4] * y + mat[5];
            // back to pixel coordinates of the source grid
            let mut px = (xs + 1.0) * src_w as f64 / 2.0 - 0.5;
            let mut py = (ys + 1.0) * src_h as f64 / 2.0 - 0.5;
            if (px - px.round()).abs() < 1e-9 {
                px = px.round();
            }
            if (py - py.round()).abs() < 1e-9 {
                py = py.round();
            }
            let x0 = px.floor();
            let y0 = py.floor();
            let fx = px - x0;
            let fy = py - y0;
            let ix0 = reflect_index(x0 as isize, src_w);
            let ix1 = reflect_index(x0 as isize + 1, src_w);
            let iy0 = reflect_index(y0 as isize, src_h);
            let iy1 = reflect_index(y0 as isize + 1, src_h);
            taps.push([
                Tap {
                    idx: iy0 * src_w + ix0,
                    w: (1.0 - fy) * (1.0 - fx),
                },
                Tap {
                    idx: iy0 * src_w + ix1,
                    w: (1.0 - fy) * fx,
                },
                Tap {
                    idx: iy1 * src_w + ix0,
                    w: fy * (1.0 - fx),
                },
                Tap {
                    idx: iy1 * src_w + ix1,
                    w: fy * fx,
                },
            ]);
        }
    }
    taps
}

/// Apply affine resampling taps: out [N,C,out_h,out_w] from src [N,C,src_h,src_w].
pub fn affine_resample_fwd(src: &Tensor, taps: &[[Tap; 4]], out_h: usize, out_w: usize) -> Tensor {
    let s = src.shape();
    let (n, c, sh, sw) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(IxDyn(&[n, c, out_h, out_w]));
    let xi = src.as_slice().unwrap();
    let oi = out.as_slice_mut().unwrap();
    let plane_in = sh * sw;
    let plane_out = out_h * out_w;
    for nc in 0..n * c {
        let ib = nc * plane_in;
        let ob = nc * plane_out;
        for (p, t) in taps.iter().enumerate() {
            oi[ob + p] = t[0].w * xi[ib + t[0].idx]
                + t[1].w * xi[ib + t[1].idx]
                + t[2].w * xi[ib + t[2].idx]
                + t[3].w * xi[ib + t[3].idx];
        }
    }
    out
}

/// Adjoint of [`affine_resample_fwd`]: scatter grad [N,C,out_h,out_w] back onto
/// the source grid [N,C,src_h,src_w].
pub fn affine_resample_adj(
    grad: &Tensor,
    taps: &[[Tap; 4]],
    src_h: usize,
    src_w: usize,
) -> Tensor {
    let s = grad.shape();
    let (n, c, oh, ow) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(IxDyn(&[n, c, src_h, src_w]));
    let gi = grad.as_slice().unwrap();
    let oi = out.as_slice_mut().unwrap();
    let plane_in = src_h * src_w;
    let plane_out = oh * ow;
    for nc in 0..n * c {
        let ib = nc * plane_in;
        let ob = nc * plane_out;
        for (p, t) in taps.iter().enumerate() {
            let g = gi[ob + p];
            for tap in t {
                oi[ib + tap.idx] += tap.w * g;
            }
        }
    }
    out
}

/// Per-sample variant of [`affine_resample_fwd`]: `mats[i]` warps sample `i`.
pub fn affine_resample_per_sample_fwd(
    src: &Tensor,
    mats: &[[f64; 6]],
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let s = src.shape();
    let (n, c, sh, sw) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(IxDyn(&[n, c, out_h, out_w]));
    let xi = src.as_slice().unwrap();
    let oi = out.as_slice_mut().unwrap();
    let plane_in = sh * sw;
    let plane_out = out_h * out_w;
    for i in 0..n {
        let taps = affine_taps(&mats[i], out_h, out_w, sh, sw);
        for ch in 0..c {
            let ib = (i * c + ch) * plane_in;
            let ob = (i * c + ch) * plane_out;
            for (p, t) in taps.iter().enumerate() {
                oi[ob + p] = t[0].w * xi[ib + t[0].idx]
                    + t[1].w * xi[ib + t[1].idx]
                    + t[2].w * xi[ib + t[2].idx]
                    + t[3].w * xi[ib + t[3].idx];
            }
        }
    }
    out
}

/// Adjoint of [`affine_resample_per_sample_fwd`].
pub fn affine_resample_per_sample_adj(
    grad: &Tensor,
    mats: &[[f64; 6]],
    out_h: usize,
    out_w: usize,
    src_h: usize,
    src_w: usize,
) -> Tensor {
    let s = grad.shape();
    let (n, c, goh, gow) = (s[0], s[1], s[2], s[3]);
    assert_eq!((goh, gow), (out_h, out_w));
    let mut out = Tensor::zeros(IxDyn(&[n, c, src_h, src_w]));
    let gi = grad.as_slice().unwrap();
    let oi = out.as_slice_mut().unwrap();
    let plane_in = src_h * src_w;
    let plane_out = out_h * out_w;
    for i in 0..n {
        let taps = affine_taps(&mats[i], out_h, out_w, src_h, src_w);
        for ch in 0..c {
            let ib = (i * c + ch) * plane_in;
            let ob = (i * c + ch) * plane_out;
            for (p, t) in taps.iter().enumerate() {
                let g = gi[ob + p];
                for tap in t {
                    oi[ib + tap.idx] += tap.w * g;
                }
            }
        }
    }
    out
}
