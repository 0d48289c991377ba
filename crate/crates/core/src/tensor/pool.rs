use super::{Scalar, Tensor, TensorError};

/// Winning input position of every 2×2 window, recorded by
/// [`maxpool2_forward`] for the paired backward call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndex {
    input_shape: [usize; 3],
    winners: Vec<usize>,
}

impl PoolIndex {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        let [h, w, c] = self.input_shape;
        [h / 2, w / 2, c]
    }

    /// Flat input index chosen for each output element.
    pub fn winners(&self) -> &[usize] {
        &self.winners
    }
}

/// 2×2 max pooling, stride 2. A trailing odd row or column is dropped.
/// Ties resolve to the first position in row-major scan order.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndex), TensorError> {
    let (h, w, c) = input.dims3("maxpool2")?;
    if h < 2 || w < 2 {
        return Err(TensorError::Degenerate { op: "maxpool2", h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut winners = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            let top = ((2 * y) * w + 2 * x) * c;
            let bottom = top + w * c;
            let window = [top, top + c, bottom, bottom + c];
            for ch in 0..c {
                let mut best = window[0] + ch;
                for &base in &window[1..] {
                    if src[base + ch] > src[best] {
                        best = base + ch;
                    }
                }
                out.push(src[best]);
                winners.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![oh, ow, c], out)?,
        PoolIndex {
            input_shape: [h, w, c],
            winners,
        },
    ))
}

/// Routes each output gradient to the input position that won its window.
pub fn maxpool2_backward<T: Scalar>(index: &PoolIndex, grad_out: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let expected = index.output_shape();
    if grad_out.shape() != expected || index.winners.len() != grad_out.len() {
        return Err(TensorError::StaleIndex(format!(
            "index expects gradient {:?}, got {:?}",
            expected,
            grad_out.shape()
        )));
    }
    let mut grad_in = Tensor::zeros(&index.input_shape);
    let gi = grad_in.data_mut();
    for (&pos, &g) in index.winners.iter().zip(grad_out.data()) {
        gi[pos] += g;
    }
    Ok(grad_in)
}
