use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use firenet::tensor::{
    conv2d_backward, conv2d_forward, cross_entropy, dense_backward, dense_forward, maxpool2_backward, maxpool2_forward,
    relu, relu_backward, softmax, ConvParams, DenseParams, Tensor,
};

fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_conv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Vec<f64> {
    let [h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let (kh, kw, _, co) = p.dims();
    let k = p.kernels.data();
    let mut out = Vec::new();
    for y in 0..=h - kh {
        for xx in 0..=w - kw {
            for o in 0..co {
                let mut s = p.bias.data()[o];
                for i in 0..kh {
                    for j in 0..kw {
                        for ch in 0..c {
                            s += x.data()[((y + i) * w + xx + j) * c + ch] * k[((i * kw + j) * c + ch) * co + o];
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

fn naive_dense(x: &[f64], p: &DenseParams<f64>) -> Vec<f64> {
    let (n_in, n_out) = p.dims();
    (0..n_out)
        .map(|o| p.bias.data()[o] + (0..n_in).map(|i| x[i] * p.weights.data()[i * n_out + o]).sum::<f64>())
        .collect()
}

#[test]
fn conv_matches_naive_loops_over_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..120 {
        let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(kh..kh + 8), rng.random_range(kw..kw + 8));
        let (ci, co) = (rng.random_range(1..=5), rng.random_range(1..=6));
        let x = random_tensor(&[h, w, ci], &mut rng);
        let p = ConvParams::new(
            random_tensor(&[kh, kw, ci, co], &mut rng),
            random_tensor(&[co], &mut rng),
        )
        .unwrap();
        let got = conv2d_forward(&x, &p).unwrap();
        assert_eq!(got.shape(), [h - kh + 1, w - kw + 1, co]);
        for (a, b) in got.data().iter().zip(naive_conv(&x, &p)) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn dense_matches_naive_loops_over_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..120 {
        let (n_in, n_out) = (rng.random_range(1..60), rng.random_range(1..20));
        let x = random_tensor(&[n_in], &mut rng);
        let p = DenseParams::new(
            random_tensor(&[n_in, n_out], &mut rng),
            random_tensor(&[n_out], &mut rng),
        )
        .unwrap();
        let got = dense_forward(&x, &p).unwrap();
        for (a, b) in got.data().iter().zip(naive_dense(x.data(), &p)) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

/// Central difference of `f` with respect to every element of `t`.
fn numeric_grad(t: &mut Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let eps = 1e-6;
    (0..t.len())
        .map(|i| {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + eps;
            let up = f(t);
            t.data_mut()[i] = orig - eps;
            let down = f(t);
            t.data_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len());
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs()).max(1e-8);
        assert!((a - n).abs() / scale < 1e-4, "analytic {a} vs numeric {n}");
    }
}

fn weighted_sum(t: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let x = random_tensor(&[6, 5, 2], &mut rng);
        let mut k = random_tensor(&[3, 3, 2, 3], &mut rng);
        let mut b = random_tensor(&[3], &mut rng);
        let g = random_tensor(&[4, 3, 3], &mut rng);
        let p = ConvParams::new(k.clone(), b.clone()).unwrap();
        let (gx, gp) = conv2d_backward(&x, &p, &g).unwrap();

        let loss = |x: &Tensor<f64>, p: &ConvParams<f64>| weighted_sum(&conv2d_forward(x, p).unwrap(), &g);
        assert_close(gx.data(), &numeric_grad(&mut x.clone(), |t| loss(t, &p)));
        let bb = b.clone();
        assert_close(
            gp.kernels.data(),
            &numeric_grad(&mut k, |t| loss(&x, &ConvParams::new(t.clone(), bb.clone()).unwrap())),
        );
        let kk = p.kernels.clone();
        assert_close(
            gp.bias.data(),
            &numeric_grad(&mut b, |t| loss(&x, &ConvParams::new(kk.clone(), t.clone()).unwrap())),
        );
    }
}

#[test]
fn dense_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&[7], &mut rng);
    let mut w = random_tensor(&[7, 4], &mut rng);
    let mut b = random_tensor(&[4], &mut rng);
    let g = random_tensor(&[4], &mut rng);
    let p = DenseParams::new(w.clone(), b.clone()).unwrap();
    let (gx, gp) = dense_backward(&x, &p, &g).unwrap();
    let loss = |x: &Tensor<f64>, p: &DenseParams<f64>| weighted_sum(&dense_forward(x, p).unwrap(), &g);
    assert_close(gx.data(), &numeric_grad(&mut x.clone(), |t| loss(t, &p)));
    let bb = b.clone();
    assert_close(
        gp.weights.data(),
        &numeric_grad(&mut w, |t| loss(&x, &DenseParams::new(t.clone(), bb.clone()).unwrap())),
    );
    let ww = p.weights.clone();
    assert_close(
        gp.bias.data(),
        &numeric_grad(&mut b, |t| loss(&x, &DenseParams::new(ww.clone(), t.clone()).unwrap())),
    );
}

#[test]
fn pool_and_relu_backward_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Values bounded away from ties and from zero.
    let mut x = Tensor::from_fn(&[5, 6, 2], |i| {
        let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        s * (0.1 + i as f64 * 0.013)
    });
    let (y, idx) = maxpool2_forward(&x).unwrap();
    let g = random_tensor(y.shape(), &mut rng);
    let gx = maxpool2_backward(&idx, &g).unwrap();
    assert_close(
        gx.data(),
        &numeric_grad(&mut x.clone(), |t| weighted_sum(&maxpool2_forward(t).unwrap().0, &g)),
    );

    let g = random_tensor(x.shape(), &mut rng);
    let gx = relu_backward(&x, &g).unwrap();
    assert_close(gx.data(), &numeric_grad(&mut x, |t| weighted_sum(&relu(t), &g)));
}

#[test]
fn softmax_cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for target in 0..3 {
        let mut z = random_tensor(&[3], &mut rng);
        let (_, g) = cross_entropy(&softmax(&z), target).unwrap();
        let numeric = numeric_grad(&mut z, |t| cross_entropy(&softmax(t), target).unwrap().0);
        assert_close(g.data(), &numeric);
    }
}

#[test]
fn pool_floors_odd_sides_and_prefers_first_tie() {
    let x = Tensor::<f32>::filled(&[5, 7, 1], 1.0);
    let (y, idx) = maxpool2_forward(&x).unwrap();
    assert_eq!(y.shape(), [2, 3, 1]);
    assert_eq!(idx.winners()[0], 0);
    assert_eq!(idx.winners()[1], 2);
}
