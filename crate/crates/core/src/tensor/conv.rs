use super::{mismatch, Scalar, Tensor, TensorError};

/// Kernels `[kh, kw, c_in, c_out]` plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernels: Tensor<T>, bias: Tensor<T>) -> Result<Self, TensorError> {
        let [_, _, _, c_out] = kernels.shape()[..] else {
            return Err(mismatch("conv params", "[kh, kw, c_in, c_out]", kernels.shape()));
        };
        if bias.shape() != [c_out] {
            return Err(mismatch("conv params", [c_out], bias.shape()));
        }
        Ok(Self { kernels, bias })
    }

    pub fn zeros(kh: usize, kw: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            kernels: Tensor::zeros(&[kh, kw, c_in, c_out]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    /// `(kh, kw, c_in, c_out)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.kernels.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            kernels: self.kernels.cast(),
            bias: self.bias.cast(),
        }
    }
}

struct Geometry {
    w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    c_out: usize,
}

impl Geometry {
    fn check<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Self, TensorError> {
        let (h, w, c_in) = input.dims3("conv2d")?;
        let (kh, kw, kc, c_out) = params.dims();
        if kc != c_in {
            return Err(mismatch("conv2d input channels", kc, c_in));
        }
        if h < kh || w < kw {
            return Err(mismatch("conv2d spatial size", format!(">= {kh}x{kw}"), (h, w)));
        }
        Ok(Self {
            w,
            c_in,
            kh,
            kw,
            out_h: h - kh + 1,
            out_w: w - kw + 1,
            c_out,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unrolls every receptive field into a row of length `kh*kw*c_in`, ordered
/// `(dy, dx, ch)` to match the kernel tensor's row-major layout.
fn im2col<T: Scalar>(input: &[T], g: &Geometry) -> Vec<T> {
    let k = g.patch_len();
    let row_run = g.kw * g.c_in;
    let mut cols = Vec::with_capacity(g.positions() * k);
    for y in 0..g.out_h {
        for x in 0..g.out_w {
            for dy in 0..g.kh {
                let start = ((y + dy) * g.w + x) * g.c_in;
                cols.extend_from_slice(&input[start..start + row_run]);
            }
        }
    }
    cols
}

/// VALID (no padding), stride-1 2-D convolution over an HWC tensor.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>, TensorError> {
    let g = Geometry::check(input, params)?;
    let cols = im2col(input.data(), &g);
    let k = g.patch_len();
    let weights = params.kernels.data();
    let bias = params.bias.data();
    let mut out = vec![T::zero(); g.positions() * g.c_out];
    for (patch, out_row) in cols.chunks_exact(k).zip(out.chunks_exact_mut(g.c_out)) {
        out_row.copy_from_slice(bias);
        for (&a, w_row) in patch.iter().zip(weights.chunks_exact(g.c_out)) {
            for (o, &w) in out_row.iter_mut().zip(w_row) {
                *o += a * w;
            }
        }
    }
    Tensor::new(vec![g.out_h, g.out_w, g.c_out], out)
}

/// Gradients of [`conv2d_forward`]; returns `(grad_input, grad_params)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvParams<T>), TensorError> {
    let (kh, kw, c_in, c_out) = params.dims();
    let mut grads = ConvParams::zeros(kh, kw, c_in, c_out);
    let grad_input = conv2d_backward_accumulate(input, params, grad_out, &mut grads, true)?;
    Ok((grad_input.expect("requested"), grads))
}

/// Adds parameter gradients into `grads`; computes the input gradient only
/// when `want_input` is set.
pub fn conv2d_backward_accumulate<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
    grads: &mut ConvParams<T>,
    want_input: bool,
) -> Result<Option<Tensor<T>>, TensorError> {
    let g = Geometry::check(input, params)?;
    let expected = [g.out_h, g.out_w, g.c_out];
    if grad_out.shape() != expected {
        return Err(mismatch("conv2d grad_out", expected, grad_out.shape()));
    }
    if grads.kernels.shape() != params.kernels.shape() {
        return Err(mismatch("conv2d grads", params.kernels.shape(), grads.kernels.shape()));
    }
    let k = g.patch_len();
    let cols = im2col(input.data(), &g);
    let go = grad_out.data();

    {
        let gb = grads.bias.data_mut();
        for row in go.chunks_exact(g.c_out) {
            for (b, &v) in gb.iter_mut().zip(row) {
                *b += v;
            }
        }
    }
    {
        let gw = grads.kernels.data_mut();
        for (patch, g_row) in cols.chunks_exact(k).zip(go.chunks_exact(g.c_out)) {
            for (&a, gw_row) in patch.iter().zip(gw.chunks_exact_mut(g.c_out)) {
                if a == T::zero() {
                    continue;
                }
                for (acc, &v) in gw_row.iter_mut().zip(g_row) {
                    *acc += a * v;
                }
            }
        }
    }
    if !want_input {
        return Ok(None);
    }

    let weights = params.kernels.data();
    let mut grad_in = vec![T::zero(); input.len()];
    let row_run = g.kw * g.c_in;
    let mut patch_grad = vec![T::zero(); k];
    for (p, g_row) in go.chunks_exact(g.c_out).enumerate() {
        for (pg, w_row) in patch_grad.iter_mut().zip(weights.chunks_exact(g.c_out)) {
            let mut s = T::zero();
            for (&w, &v) in w_row.iter().zip(g_row) {
                s += w * v;
            }
            *pg = s;
        }
        let (y, x) = (p / g.out_w, p % g.out_w);
        for dy in 0..g.kh {
            let start = ((y + dy) * g.w + x) * g.c_in;
            let src = &patch_grad[dy * row_run..(dy + 1) * row_run];
            for (dst, &v) in grad_in[start..start + row_run].iter_mut().zip(src) {
                *dst += v;
            }
        }
    }
    Ok(Some(Tensor::new(input.shape().to_vec(), grad_in)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_window() {
        let input = Tensor::<f32>::filled(&[3, 3, 1], 1.0);
        let params = ConvParams::new(Tensor::filled(&[3, 3, 1, 1], 1.0), Tensor::zeros(&[1])).unwrap();
        let out = conv2d_forward(&input, &params).unwrap();
        assert_eq!(out.shape(), [1, 1, 1]);
        assert_eq!(out.data(), [9.0]);
    }

    #[test]
    fn firenet_first_layer_shape() {
        let input = Tensor::<f32>::zeros(&[64, 64, 3]);
        let params = ConvParams::zeros(3, 3, 3, 16);
        assert_eq!(conv2d_forward(&input, &params).unwrap().shape(), [62, 62, 16]);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let input = Tensor::<f32>::from_fn(&[5, 5, 2], |i| (i as f32 * 0.37).sin());
        let params = ConvParams::new(
            Tensor::from_fn(&[3, 3, 2, 3], |i| (i as f32 * 0.11).cos()),
            Tensor::filled(&[3], 0.5),
        )
        .unwrap();
        let (gi, gp) = conv2d_backward(&input, &params, &Tensor::zeros(&[3, 3, 3])).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gp.kernels.data().iter().all(|&v| v == 0.0));
        assert!(gp.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_scales_gradient() {
        let input = Tensor::<f32>::from_fn(&[4, 4, 1], |i| i as f32);
        let params = ConvParams::new(Tensor::filled(&[1, 1, 1, 1], 2.5), Tensor::zeros(&[1])).unwrap();
        let grad_out = Tensor::from_fn(&[4, 4, 1], |i| (i as f32) - 3.0);
        let (gi, _) = conv2d_backward(&input, &params, &grad_out).unwrap();
        for (g, o) in gi.data().iter().zip(grad_out.data()) {
            assert_eq!(*g, o * 2.5);
        }
    }

    #[test]
    fn shape_errors() {
        let params = ConvParams::<f32>::zeros(3, 3, 2, 4);
        let err = conv2d_forward(&Tensor::zeros(&[5, 5, 3]), &params).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        assert!(conv2d_forward(&Tensor::zeros(&[2, 5, 2]), &params).is_err());
        assert!(conv2d_forward(&Tensor::zeros(&[25, 2]), &params).is_err());
        let input = Tensor::zeros(&[5, 5, 2]);
        assert!(conv2d_backward(&input, &params, &Tensor::zeros(&[3, 3, 3])).is_err());
    }
}
