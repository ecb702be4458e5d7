use std::collections::BTreeMap;

use super::params::{ParamGroup, ParamSet};
use crate::linalg::Matrix;
use crate::tape::Gradients;

/// Adam with one learning rate per [`ParamGroup`] and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr_backbone: f64,
    pub lr_cpcanet: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    moments: BTreeMap<&'static str, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(lr_backbone: f64, lr_cpcanet: f64) -> Self {
        Adam {
            lr_backbone,
            lr_cpcanet,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update of every tensor that has a gradient and is not frozen.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &Gradients, frozen: impl Fn(&str) -> bool) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (name, tensor) in params.tensors_mut() {
            let Some(grad) = grads.get(name) else { continue };
            if frozen(name) {
                continue;
            }
            let lr = match P::group_of(name) {
                ParamGroup::Backbone => self.lr_backbone,
                ParamGroup::CpcaNet => self.lr_cpcanet,
            };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Matrix::zeros(grad.rows(), grad.cols()), Matrix::zeros(grad.rows(), grad.cols())));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let it = tensor
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(grad.as_slice());
            for (((w, m), v), &g) in it {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
