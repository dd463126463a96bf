//! 3×3 convolution, stride 1, zero padding 1.
//!
//! The `_sliced` variants read a sub-matrix of a larger weight tensor: output
//! channels `out_ch` and input channels `in_ch` of `w`. The input tensor holds
//! only the `in_ch` channels. Full-tensor calls go through the same loops, so
//! a sliced call and a call on an extracted copy of the same weights produce
//! bit-identical results.

use std::ops::Range;

use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cin_full: usize,
}

fn check_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    out_ch: &Range<usize>,
    in_ch: &Range<usize>,
) -> Result<Geometry> {
    x.expect_rank(4, "conv2d input")?;
    w.expect_rank(4, "conv2d weight")?;
    let ws = w.shape();
    if ws[2] != KERNEL || ws[3] != KERNEL {
        return Err(dim_err!("conv2d: kernel must be 3x3, got {:?}", ws));
    }
    if out_ch.is_empty() || out_ch.end > ws[0] || in_ch.is_empty() || in_ch.end > ws[1] {
        return Err(dim_err!(
            "conv2d: channel slice out {out_ch:?} / in {in_ch:?} outside weight {:?}",
            ws
        ));
    }
    if x.dim(1) != in_ch.len() {
        return Err(dim_err!(
            "conv2d: input has {} channels, slice expects {}",
            x.dim(1),
            in_ch.len()
        ));
    }
    Ok(Geometry {
        n: x.dim(0),
        h: x.dim(2),
        w: x.dim(3),
        cin_full: ws[1],
    })
}

/// Copies one sample into a zero-padded `[C, H+2, W+2]` buffer.
fn pad_sample<T: Scalar>(src: &[T], channels: usize, h: usize, w: usize, dst: &mut Vec<T>) {
    let (hp, wp) = (h + 2, w + 2);
    dst.clear();
    dst.resize(channels * hp * wp, T::zero());
    for c in 0..channels {
        for i in 0..h {
            let s = &src[(c * h + i) * w..][..w];
            let d = &mut dst[(c * hp + i + 1) * wp + 1..][..w];
            d.copy_from_slice(s);
        }
    }
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    conv2d_forward_sliced(x, w, b, 0..w.dim(0), 0..w.dim(1))
}

pub fn conv2d_forward_sliced<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    out_ch: Range<usize>,
    in_ch: Range<usize>,
) -> Result<Tensor<T>> {
    let g = check_shapes(x, w, &out_ch, &in_ch)?;
    if b.shape() != [w.dim(0)] {
        return Err(dim_err!(
            "conv2d: bias {:?} does not match {} output channels",
            b.shape(),
            w.dim(0)
        ));
    }
    x.check_finite("conv2d input")?;
    w.check_finite("conv2d weight")?;

    let (h, wd) = (g.h, g.w);
    let (hp, wp) = (h + 2, wd + 2);
    let cin = in_ch.len();
    let cout = out_ch.len();
    let plane = h * wd;
    let wdat = w.data();
    let mut out = vec![T::zero(); g.n * cout * plane];
    let mut xp = Vec::new();

    for n in 0..g.n {
        pad_sample(&x.data()[n * cin * plane..][..cin * plane], cin, h, wd, &mut xp);
        for (oi, o) in out_ch.clone().enumerate() {
            let dst = &mut out[(n * cout + oi) * plane..][..plane];
            dst.fill(b.data()[o]);
            for (ci, c) in in_ch.clone().enumerate() {
                let taps = &wdat[(o * g.cin_full + c) * TAPS..][..TAPS];
                let xc = &xp[ci * hp * wp..][..hp * wp];
                for u in 0..KERNEL {
                    for v in 0..KERNEL {
                        let wv = taps[u * KERNEL + v];
                        for i in 0..h {
                            axpy(wv, &xc[(i + u) * wp + v..][..wd], &mut dst[i * wd..][..wd]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, cout, h, wd], out)
}

/// Exact gradients of `sum(dy * conv2d_forward(x, w, b))`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[w.dim(0)]);
    let dx = conv2d_backward_sliced(x, w, dy, 0..w.dim(0), 0..w.dim(1), &mut dw, &mut db, true)?
        .expect("dx requested");
    Ok((dx, dw, db))
}

/// Sliced backward pass. `dw` and `db` have the full weight/bias shapes and
/// are accumulated into (only the sliced region is touched). `dx` is
/// computed only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_sliced<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    out_ch: Range<usize>,
    in_ch: Range<usize>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
    want_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let g = check_shapes(x, w, &out_ch, &in_ch)?;
    let cin = in_ch.len();
    let cout = out_ch.len();
    if dy.shape() != [g.n, cout, g.h, g.w] {
        return Err(dim_err!(
            "conv2d backward: dy {:?} does not match output [{}, {cout}, {}, {}]",
            dy.shape(),
            g.n,
            g.h,
            g.w
        ));
    }
    if dw.shape() != w.shape() || db.shape() != [w.dim(0)] {
        return Err(dim_err!("conv2d backward: gradient buffers do not match weight"));
    }
    dy.check_finite("conv2d dy")?;

    let (h, wd) = (g.h, g.w);
    let (hp, wp) = (h + 2, wd + 2);
    let plane = h * wd;
    let wdat = w.data();
    let mut xp = Vec::new();
    let mut dxp = vec![T::zero(); if want_dx { cin * hp * wp } else { 0 }];
    let mut dx = if want_dx {
        vec![T::zero(); g.n * cin * plane]
    } else {
        Vec::new()
    };

    for n in 0..g.n {
        pad_sample(&x.data()[n * cin * plane..][..cin * plane], cin, h, wd, &mut xp);
        if want_dx {
            dxp.fill(T::zero());
        }
        for (oi, o) in out_ch.clone().enumerate() {
            let g_out = &dy.data()[(n * cout + oi) * plane..][..plane];
            let bsum = g_out.iter().fold(T::zero(), |acc, &v| acc + v);
            db.data_mut()[o] = db.data()[o] + bsum;
            for (ci, c) in in_ch.clone().enumerate() {
                let base = (o * g.cin_full + c) * TAPS;
                let xc = &xp[ci * hp * wp..][..hp * wp];
                for u in 0..KERNEL {
                    for v in 0..KERNEL {
                        let mut acc = T::zero();
                        for i in 0..h {
                            let xr = &xc[(i + u) * wp + v..][..wd];
                            let gr = &g_out[i * wd..][..wd];
                            for (a, b) in xr.iter().zip(gr) {
                                acc = acc + *a * *b;
                            }
                        }
                        let k = base + u * KERNEL + v;
                        dw.data_mut()[k] = dw.data()[k] + acc;
                        if want_dx {
                            let wv = wdat[k];
                            let dxc = &mut dxp[ci * hp * wp..][..hp * wp];
                            for i in 0..h {
                                axpy(wv, &g_out[i * wd..][..wd], &mut dxc[(i + u) * wp + v..][..wd]);
                            }
                        }
                    }
                }
            }
        }
        if want_dx {
            for ci in 0..cin {
                for i in 0..h {
                    let s = &dxp[(ci * hp + i + 1) * wp + 1..][..wd];
                    dx[((n * cin + ci) * h + i) * wd..][..wd].copy_from_slice(s);
                }
            }
        }
    }
    if want_dx {
        Ok(Some(Tensor::new(vec![g.n, cin, h, wd], dx)?))
    } else {
        Ok(None)
    }
}
