//! 2×2 max pooling, stride 2, floor semantics.

use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Flat input offsets of each pooled maximum, aligned with the pooled output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndex(pub Vec<usize>);

/// Ties resolve to the lowest flat index; a trailing odd row/column is dropped.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndex)> {
    x.expect_rank(4, "maxpool2 input")?;
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if h < 2 || w < 2 {
        return Err(dim_err!("maxpool2: spatial size {h}x{w} is below 2x2"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.push(src[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, PoolIndex(idx)))
}

pub fn maxpool2_backward<T: Scalar>(
    idx: &PoolIndex,
    dy: &Tensor<T>,
    in_shape: &[usize],
) -> Result<Tensor<T>> {
    if idx.0.len() != dy.len() {
        return Err(dim_err!(
            "maxpool2 backward: {} indices for {} gradients",
            idx.0.len(),
            dy.len()
        ));
    }
    let mut dx = Tensor::zeros(in_shape);
    let len = dx.len();
    let d = dx.data_mut();
    for (&pos, &g) in idx.0.iter().zip(dy.data()) {
        if pos >= len {
            return Err(dim_err!("maxpool2 backward: index {pos} outside input of {len}"));
        }
        d[pos] = d[pos] + g;
    }
    Ok(dx)
}
