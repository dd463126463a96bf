//! Fully-connected layer `out = x · wᵀ + b`.
//!
//! As with convolution, the sliced form reads the feature columns `cols` of a
//! wider weight matrix and optionally skips the bias (used for partial logits).

use std::ops::Range;

use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

pub fn fc_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    fc_forward_sliced(x, w, Some(b), 0..w.dim(1))
}

pub fn fc_forward_sliced<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cols: Range<usize>,
) -> Result<Tensor<T>> {
    x.expect_rank(2, "fc input")?;
    w.expect_rank(2, "fc weight")?;
    let (n, f) = (x.dim(0), x.dim(1));
    let (o_dim, f_full) = (w.dim(0), w.dim(1));
    if cols.end > f_full || cols.len() != f {
        return Err(dim_err!(
            "fc: input has {f} features, weight {:?} sliced to {cols:?}",
            w.shape()
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [o_dim] {
            return Err(dim_err!("fc: bias {:?} for {o_dim} outputs", b.shape()));
        }
    }
    x.check_finite("fc input")?;
    let mut out = Vec::with_capacity(n * o_dim);
    for row in x.data().chunks(f) {
        for o in 0..o_dim {
            let wr = &w.data()[o * f_full + cols.start..][..f];
            let mut acc = bias.map_or(T::zero(), |b| b.data()[o]);
            for (a, b) in row.iter().zip(wr) {
                acc = acc + *a * *b;
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![n, o_dim], out)
}

pub fn fc_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[w.dim(0)]);
    let dx = fc_backward_sliced(x, w, dy, 0..w.dim(1), &mut dw, Some(&mut db), true)?
        .expect("dx requested");
    Ok((dx, dw, db))
}

/// Accumulates into full-shape `dw` (columns `cols` only) and `db`.
pub fn fc_backward_sliced<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    cols: Range<usize>,
    dw: &mut Tensor<T>,
    db: Option<&mut Tensor<T>>,
    want_dx: bool,
) -> Result<Option<Tensor<T>>> {
    x.expect_rank(2, "fc input")?;
    let (n, f) = (x.dim(0), x.dim(1));
    let (o_dim, f_full) = (w.dim(0), w.dim(1));
    if cols.end > f_full || cols.len() != f || dy.shape() != [n, o_dim] || dw.shape() != w.shape() {
        return Err(dim_err!(
            "fc backward: x {:?}, w {:?}, dy {:?}, cols {cols:?}",
            x.shape(),
            w.shape(),
            dy.shape()
        ));
    }
    dy.check_finite("fc dy")?;
    if let Some(db) = db {
        for (o, slot) in db.data_mut().iter_mut().enumerate() {
            let mut acc = T::zero();
            for s in 0..n {
                acc = acc + dy.data()[s * o_dim + o];
            }
            *slot = *slot + acc;
        }
    }
    for o in 0..o_dim {
        let dwr = &mut dw.data_mut()[o * f_full + cols.start..][..f];
        for s in 0..n {
            let g = dy.data()[s * o_dim + o];
            let xr = &x.data()[s * f..][..f];
            for (d, &xv) in dwr.iter_mut().zip(xr) {
                *d = *d + g * xv;
            }
        }
    }
    if !want_dx {
        return Ok(None);
    }
    let mut dx = vec![T::zero(); n * f];
    for s in 0..n {
        let dxr = &mut dx[s * f..][..f];
        for o in 0..o_dim {
            let g = dy.data()[s * o_dim + o];
            let wr = &w.data()[o * f_full + cols.start..][..f];
            for (d, &wv) in dxr.iter_mut().zip(wr) {
                *d = *d + g * wv;
            }
        }
    }
    Ok(Some(Tensor::new(vec![n, f], dx)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_input() {
        let x = Tensor::new(vec![2, 3], vec![1.0f32, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = fc_forward(&x, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn hand_dot_product() {
        let x = Tensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap();
        let w = Tensor::new(vec![1, 2], vec![3.0f32, 4.0]).unwrap();
        let b = Tensor::new(vec![1], vec![5.0f32]).unwrap();
        assert_eq!(fc_forward(&x, &w, &b).unwrap().data(), &[16.0]);
    }

    #[test]
    fn sliced_partials_sum_to_full() {
        let x = Tensor::<f64>::from_fn(&[2, 6], |i| (i as f64 * 0.3).sin());
        let w = Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.11).cos());
        let b = Tensor::from_fn(&[4], |i| i as f64);
        let full = fc_forward(&x, &w, &b).unwrap();
        let left = crate::tensor::Tensor::from_fn(&[2, 3], |i| x.data()[(i / 3) * 6 + i % 3]);
        let right = crate::tensor::Tensor::from_fn(&[2, 3], |i| x.data()[(i / 3) * 6 + 3 + i % 3]);
        let a = fc_forward_sliced(&left, &w, Some(&b), 0..3).unwrap();
        let c = fc_forward_sliced(&right, &w, None, 3..6).unwrap();
        for k in 0..8 {
            assert!((a.data()[k] + c.data()[k] - full.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_features_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 4]);
        assert!(fc_forward(&x, &w, &Tensor::zeros(&[2])).is_err());
    }
}
