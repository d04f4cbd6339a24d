//! SGD with classical momentum.

use crate::tensor::Tensor;

pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(learning_rate: f32, momentum: f32) -> Self {
        Sgd { learning_rate, momentum, velocity: Vec::new() }
    }

    /// `v ← momentum · v + g; p ← p − lr · v` for each parameter/gradient pair.
    /// A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f32]>]) {
        assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.numel(), v.len(), "parameter set changed between steps");
            let data = p.data_mut();
            match g {
                Some(g) => {
                    for ((pv, vv), &gv) in data.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                        *vv = self.momentum * *vv + gv;
                        *pv -= self.learning_rate * *vv;
                    }
                }
                None => {
                    for (pv, vv) in data.iter_mut().zip(v.iter_mut()) {
                        *vv *= self.momentum;
                        *pv -= self.learning_rate * *vv;
                    }
                }
            }
        }
    }
}
