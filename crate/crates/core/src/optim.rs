use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Optimizer and batching hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs_per_step: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            epochs_per_step: 1,
        }
    }
}

impl Hyper {
    /// `learning_rate == 0` is accepted so a schedule can evaluate without updating.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Input(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Input(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// SGD with momentum: `v ← μ·v − lr·g; p ← p + v` where not frozen.
/// Frozen elements keep both parameter and velocity bit-identical.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    hyper: &Hyper,
    frozen: &[bool],
) -> Result<()> {
    if grad.shape() != param.shape() || velocity.shape() != param.shape() || frozen.len() != param.len() {
        return Err(dim_err!(
            "sgd_step: param {:?}, grad {:?}, velocity {:?}, mask {}",
            param.shape(),
            grad.shape(),
            velocity.shape(),
            frozen.len()
        ));
    }
    let lr = T::from_f64(hyper.learning_rate);
    let mu = T::from_f64(hyper.momentum);
    for (((p, v), &g), &f) in param
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut().iter_mut())
        .zip(grad.data())
        .zip(frozen)
    {
        if f {
            continue;
        }
        *v = mu * *v - lr * g;
        *p = *p + *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn plain_step() {
        let hyper = Hyper { learning_rate: 0.1, momentum: 0.0, ..Hyper::default() };
        let mut p = scalar(1.0);
        let mut v = scalar(0.0);
        sgd_step(&mut p, &scalar(2.0), &mut v, &hyper, &[false]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let hyper = Hyper { learning_rate: 0.1, momentum: 0.9, ..Hyper::default() };
        let mut p = scalar(0.0);
        let mut v = scalar(0.0);
        for _ in 0..2 {
            sgd_step(&mut p, &scalar(1.0), &mut v, &hyper, &[false]).unwrap();
        }
        assert!((p.data()[0] - (-0.29)).abs() < 1e-12);
    }

    #[test]
    fn frozen_is_identity() {
        let hyper = Hyper::default();
        let mut p = Tensor::<f32>::from_fn(&[4], |i| i as f32 * 0.3);
        let mut v = Tensor::from_fn(&[4], |i| i as f32 * -0.1);
        let (p0, v0) = (p.clone(), v.clone());
        let g = Tensor::filled(&[4], 123.0);
        sgd_step(&mut p, &g, &mut v, &hyper, &[true; 4]).unwrap();
        assert_eq!(p, p0);
        assert_eq!(v, v0);
    }

    #[test]
    fn rejects_bad_hyper() {
        assert!(Hyper { momentum: 1.0, ..Hyper::default() }.validate().is_err());
        assert!(Hyper { batch_size: 0, ..Hyper::default() }.validate().is_err());
        assert!(Hyper { learning_rate: -1.0, ..Hyper::default() }.validate().is_err());
    }
}
