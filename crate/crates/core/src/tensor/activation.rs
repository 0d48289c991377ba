use super::{Scalar, Tensor, TensorError};

/// Lower clamp applied to the target probability inside [`cross_entropy`].
pub const CE_CLAMP: f64 = 1e-7;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Gate is 1 where `input > 0` and 0 elsewhere, including exactly 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if input.shape() != grad_out.shape() {
        return Err(super::mismatch("relu_backward", input.shape(), grad_out.shape()));
    }
    let mut g = grad_out.clone();
    for (v, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *v = T::zero();
        }
    }
    Ok(g)
}

/// Max-shifted softmax over all elements.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let max = input.data().iter().copied().fold(T::neg_infinity(), T::max);
    let mut out = input.clone();
    let mut sum = T::zero();
    for v in out.data_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in out.data_mut() {
        *v /= sum;
    }
    out
}

/// Categorical cross-entropy of softmax output `probs` against `target`.
///
/// Returns the loss and its gradient with respect to the pre-softmax logits,
/// `probs - onehot(target)`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, target: usize) -> Result<(T, Tensor<T>), TensorError> {
    let k = probs.len();
    if target >= k {
        return Err(TensorError::TargetOutOfRange { target, classes: k });
    }
    let p = probs.data()[target].max(T::of_f64(CE_CLAMP)).min(T::one());
    let mut grad = probs.clone();
    grad.data_mut()[target] -= T::one();
    Ok((-p.ln(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(relu(&t(&[-1.0, 0.0, 2.0])).data(), [0.0, 0.0, 2.0]);
        let neg = t(&[-3.0, -0.5]);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let g = relu_backward(&neg, &t(&[1.0, 1.0])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g0 = relu_backward(&t(&[0.0, 1.0]), &t(&[5.0, 5.0])).unwrap();
        assert_eq!(g0.data(), [0.0, 5.0]);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&t(&[0.0, 0.0])).data(), [0.5, 0.5]);
        let big = softmax(&t(&[1000.0, 0.0]));
        assert!(big.all_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-6);
        assert!(big.data()[1] < 1e-6);
    }

    #[test]
    fn cross_entropy_values() {
        let (l, _) = cross_entropy(&t(&[1.0, 0.0]), 0).unwrap();
        assert_eq!(l, 0.0);
        let (l, g) = cross_entropy(&t(&[0.5, 0.5]), 1).unwrap();
        assert!((l - std::f32::consts::LN_2).abs() < 1e-6);
        assert_eq!(g.data(), [0.5, -0.5]);
        let (l, _) = cross_entropy(&t(&[1.0, 0.0]), 1).unwrap();
        assert!(l.is_finite());
        assert!((l as f64 - (-(CE_CLAMP.ln()))).abs() < 1e-3);
        assert!(matches!(
            cross_entropy(&t(&[0.5, 0.5]), 2),
            Err(TensorError::TargetOutOfRange { .. })
        ));
    }
}
