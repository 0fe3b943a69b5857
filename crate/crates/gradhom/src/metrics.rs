//! Relative error metrics between computed and reference tensors.

use crate::Tensor;

/// Componentwise and norm-wise relative errors,
/// `e_max = max|a - b| / ‖b‖` and `e_norm = ‖a - b‖ / ‖b‖`,
/// with `b` the reference. A zero reference norm yields absolute errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorPair {
    pub e_max: f64,
    pub e_norm: f64,
}

pub fn error_metrics(computed: &Tensor, reference: &Tensor) -> ErrorPair {
    let diff = computed.sub(reference).expect("rank mismatch in error metric");
    let denom = reference.norm();
    let scale = if denom > 0.0 { denom } else { 1.0 };
    ErrorPair { e_max: diff.max_abs() / scale, e_norm: diff.norm() / scale }
}

/// Scalar variant of [`error_metrics`].
pub fn scalar_error(computed: f64, reference: f64) -> f64 {
    let denom = reference.abs();
    let scale = if denom > 0.0 { denom } else { 1.0 };
    (computed - reference).abs() / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorN;

    #[test]
    fn exact_match_is_zero() {
        let a = Tensor::identity2();
        let m = error_metrics(&a, &a);
        assert_eq!(m.e_max, 0.0);
        assert_eq!(m.e_norm, 0.0);
    }

    #[test]
    fn known_perturbation() {
        let a = Tensor::identity2();
        let mut b = Tensor::identity2();
        b.set(&[0, 1], 3e-3);
        let m = error_metrics(&b, &a);
        let denom = 3f64.sqrt();
        assert!((m.e_max - 3e-3 / denom).abs() < 1e-18);
        assert!((m.e_norm - 3e-3 / denom).abs() < 1e-18);
    }

    #[test]
    fn zero_reference_falls_back_to_absolute() {
        let z = TensorN::zeros(2).unwrap();
        let mut b = TensorN::zeros(2).unwrap();
        b.set(&[2, 2], 4e-5);
        let m = error_metrics(&b, &z);
        assert_eq!(m.e_max, 4e-5);
    }
}
