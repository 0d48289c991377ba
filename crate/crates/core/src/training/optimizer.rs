use crate::network::{Gradients, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state, one buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f32,
    step: u32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f32, net: &Network) -> Self {
        let zeros: Vec<Vec<f32>> = net.param_tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            kind,
            learning_rate,
            step: 0,
            first: zeros,
            second,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        self.step += 1;
        let lr = self.learning_rate;
        let grads = grads.tensors();
        let params = net.param_tensors_mut();
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), vel) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((w, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *v = momentum * *v - lr * g;
                        *w += *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &g), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, NetworkConfig};
    use crate::tensor::Tensor;

    fn tiny() -> Network {
        let config = NetworkConfig {
            input_side: 1,
            input_channels: 2,
            layers: vec![LayerSpec::Flatten, LayerSpec::Softmax { units: 2 }],
            class_labels: vec!["a".into(), "b".into()],
        };
        Network::new(config, 1).unwrap()
    }

    fn constant_grads(net: &Network, value: f32) -> Gradients {
        let mut g = Gradients::zeros_like(net);
        for layer in &mut g.layers {
            for t in layer.tensors_mut() {
                *t = Tensor::filled(t.shape(), value);
            }
        }
        g
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut net = tiny();
        let before: Vec<f32> = net.param_tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.01, &net);
        let g = constant_grads(&net, 0.5);
        opt.step(&mut net, &g);
        let after: Vec<f32> = net.param_tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        for (b, a) in before.iter().zip(&after) {
            assert!((b - a - 0.01).abs() < 1e-6, "{b} -> {a}");
        }
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut net = tiny();
        let w0 = net.param_tensors()[1].data()[0];
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.5 }, 0.1, &net);
        let g = constant_grads(&net, 1.0);
        opt.step(&mut net, &g);
        opt.step(&mut net, &g);
        // -0.1, then 0.5 * -0.1 - 0.1
        assert!((net.param_tensors()[1].data()[0] - (w0 - 0.25)).abs() < 1e-6);
    }
}
