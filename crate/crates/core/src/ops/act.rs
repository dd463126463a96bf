use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("relu input")?;
    Ok(x.map(|v| if v > T::zero() { v } else { T::zero() }))
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(crate::error::dim_err!(
            "relu backward: x {:?} vs dy {:?}",
            x.shape(),
            dy.shape()
        ));
    }
    x.check_finite("relu input")?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_gradient() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
        let dy = Tensor::filled(&[3], 5.0f32);
        assert_eq!(relu_backward(&x, &dy).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn rejects_nan() {
        let x = Tensor::new(vec![1], vec![f32::NAN]).unwrap();
        assert!(relu(&x).is_err());
    }
}
