use super::{mismatch, Scalar, Tensor, TensorError};

/// Fully connected layer: weights `[n_in, n_out]` row-major, bias `[n_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self, TensorError> {
        let [_, n_out] = weights.shape()[..] else {
            return Err(mismatch("dense params", "[n_in, n_out]", weights.shape()));
        };
        if bias.shape() != [n_out] {
            return Err(mismatch("dense params", [n_out], bias.shape()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[n_in, n_out]),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    /// `(n_in, n_out)`
    pub fn dims(&self) -> (usize, usize) {
        (self.weights.shape()[0], self.weights.shape()[1])
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> DenseParams<U> {
        DenseParams {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// `out = inputᵀ · weights + bias`. Any input shape with `n_in` elements is
/// accepted; the result has shape `[n_out]`.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, params: &DenseParams<T>) -> Result<Tensor<T>, TensorError> {
    let (n_in, n_out) = params.dims();
    if input.len() != n_in {
        return Err(mismatch("dense input length", n_in, input.len()));
    }
    let mut out = params.bias.data().to_vec();
    for (&x, w_row) in input.data().iter().zip(params.weights.data().chunks_exact(n_out)) {
        if x == T::zero() {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(w_row) {
            *o += x * w;
        }
    }
    Tensor::new(vec![n_out], out)
}

/// Gradients of [`dense_forward`]; `grad_input` takes the input's shape.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &DenseParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, DenseParams<T>), TensorError> {
    let (n_in, n_out) = params.dims();
    let mut grads = DenseParams::zeros(n_in, n_out);
    let gi = dense_backward_accumulate(input, params, grad_out, &mut grads)?;
    Ok((gi, grads))
}

/// Adds parameter gradients into `grads` and returns the input gradient.
pub fn dense_backward_accumulate<T: Scalar>(
    input: &Tensor<T>,
    params: &DenseParams<T>,
    grad_out: &Tensor<T>,
    grads: &mut DenseParams<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n_in, n_out) = params.dims();
    if input.len() != n_in {
        return Err(mismatch("dense input length", n_in, input.len()));
    }
    if grad_out.len() != n_out {
        return Err(mismatch("dense grad_out length", n_out, grad_out.len()));
    }
    if grads.dims() != (n_in, n_out) {
        return Err(mismatch("dense grads", (n_in, n_out), grads.dims()));
    }
    let g = grad_out.data();
    for (b, &v) in grads.bias.data_mut().iter_mut().zip(g) {
        *b += v;
    }
    let mut grad_in = vec![T::zero(); n_in];
    let weights = params.weights.data();
    let gw = grads.weights.data_mut();
    for (i, &x) in input.data().iter().enumerate() {
        let row = i * n_out..(i + 1) * n_out;
        let mut s = T::zero();
        for (&w, &v) in weights[row.clone()].iter().zip(g) {
            s += w * v;
        }
        grad_in[i] = s;
        if x != T::zero() {
            for (acc, &v) in gw[row].iter_mut().zip(g) {
                *acc += x * v;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> DenseParams<f32> {
        DenseParams::new(
            Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }),
            Tensor::zeros(&[n]),
        )
        .unwrap()
    }

    #[test]
    fn identity_and_bias_only() {
        let x = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        assert_eq!(dense_forward(&x, &identity(2)).unwrap().data(), [1.0, 2.0]);

        let p = DenseParams::new(
            Tensor::zeros(&[2, 3]),
            Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(dense_forward(&x, &p).unwrap().data(), [0.5, -1.0, 2.0]);
    }

    #[test]
    fn identity_backward_passes_gradient_through() {
        let x = Tensor::new(vec![3], vec![0.3f32, -0.2, 1.0]).unwrap();
        let g = Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap();
        let (gi, _) = dense_backward(&x, &identity(3), &g).unwrap();
        assert_eq!(gi.data(), g.data());
    }

    #[test]
    fn zero_grad_out() {
        let x = Tensor::from_fn(&[4], |i| i as f32);
        let p = DenseParams::new(Tensor::filled(&[4, 2], 0.3), Tensor::zeros(&[2])).unwrap();
        let (gi, gp) = dense_backward(&x, &p, &Tensor::zeros(&[2])).unwrap();
        assert!(gi
            .data()
            .iter()
            .chain(gp.weights.data())
            .chain(gp.bias.data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let p = DenseParams::<f32>::zeros(4, 2);
        assert!(dense_forward(&Tensor::zeros(&[3]), &p).is_err());
        assert!(dense_backward(&Tensor::zeros(&[4]), &p, &Tensor::zeros(&[3])).is_err());
    }
}
