use alloc::vec::Vec;

use crate::error::Result;
use crate::math::exp;
use crate::Tensor;

/// Probability vector from logits, computed after subtracting the maximum.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    logits.check_finite("softmax logits")?;
    Ok(Tensor::from_vec(logits.shape(), softmax_slice(logits.data()))?)
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| exp(x - max)).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn uniform_for_equal_logits() {
        let p = softmax(&Tensor::vector(vec![0.0; 3])).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn stable_for_large_logits() {
        let p = softmax(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.data()[1].abs() < 1e-12);
    }

    #[test]
    fn matches_direct_formula() {
        // e^x / Σe^x evaluated directly; no overflow risk at these magnitudes.
        let direct: Vec<f64> = {
            let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| libm::exp(*x)).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let p = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        for (a, b) in p.data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.data()[2] - 0.665_240_955_774_821_5).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(softmax(&Tensor::vector(vec![f64::NAN, 0.0])).is_err());
    }

    proptest! {
        #[test]
        fn sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax_slice(&logits);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let q = softmax_slice(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
