//! Central-difference gradient oracle.

use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Floor for the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central-difference estimate of `df/dx`, same shape as `x`.
pub fn finite_diff_grad<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    step: T,
) -> Result<Tensor<T>> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    let two = T::one() + T::one();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (two * step));
    }
    Tensor::new(x.shape(), grad)
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest elementwise [`relative_error`] between two same-shape tensors.
pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| relative_error(x.as_f64(), y.as_f64()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &x, 1e-4).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f32>::from_f32(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| Ok(4.0f32), &x, 1e-4).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-8, 0.0) - 1e-2).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
