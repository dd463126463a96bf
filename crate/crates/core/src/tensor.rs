//! Dense row-major tensors.
//!
//! Kernels are generic over [`Scalar`] so the same code runs in `f32` for
//! training and inference and in `f64` for gradient checks.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{dim_err, Error, Result};

/// Element type accepted by every kernel.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} has a zero dimension"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable element access; the length (and so the shape invariant) cannot change.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(dim_err!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape
            ));
        }
        Ok(())
    }

    /// Returns a numeric error naming the first non-finite element.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {:?} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Concatenates two `[N, C, H, W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank(4, "concat_channels lhs")?;
    b.expect_rank(4, "concat_channels rhs")?;
    let (n, ca, h, w) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
    let cb = b.dim(1);
    if b.dim(0) != n || b.dim(2) != h || b.dim(3) != w {
        return Err(dim_err!(
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let plane_a = ca * h * w;
    let plane_b = cb * h * w;
    let mut data = Vec::with_capacity(n * (plane_a + plane_b));
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * plane_a..(s + 1) * plane_a]);
        data.extend_from_slice(&b.data()[s * plane_b..(s + 1) * plane_b]);
    }
    Tensor::new(vec![n, ca + cb, h, w], data)
}

/// Flattens `[N, ...]` into `[N, F]`.
pub fn flatten<T: Scalar>(x: Tensor<T>) -> Result<Tensor<T>> {
    let n = x.dim(0);
    let f = x.len() / n;
    x.reshape(vec![n, f])
}

/// Rows `[start, end)` of the leading (batch) axis.
pub fn slice_batch<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    if start >= end || end > x.dim(0) {
        return Err(dim_err!(
            "slice_batch {start}..{end} out of range for {:?}",
            x.shape()
        ));
    }
    let per = x.len() / x.dim(0);
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, x.data()[start * per..end * per].to_vec())
}

/// Index of the maximum of each row of a `[N, C]` tensor, lowest index on ties.
pub fn argmax_rows<T: Scalar>(x: &Tensor<T>) -> Vec<usize> {
    let cols = x.dim(x.rank() - 1);
    x.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor::new(vec![3], vec![1.0f32, f32::NAN, 2.0]).unwrap();
        let err = t.check_finite("x").unwrap_err();
        assert!(err.to_string().contains("flat index 1"));
    }

    #[test]
    fn concat_interleaves_per_sample() {
        let a = Tensor::new(vec![2, 1, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1, 1, 2], vec![5.0f32, 6.0, 7.0, 8.0]).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 1, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
