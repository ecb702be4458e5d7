use serde::Serialize;

use super::forward::accuracy;
use super::optim::Adam;
use super::params::{Dense, ModelParams, ParamSet};
use crate::data::{DomainData, DomainSet};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::tape::{Bindings, Graph};

/// Accuracies of a linear classifier fitted directly on the invariant
/// coordinates `u = βᵀz`, bypassing modulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NaiveReport {
    pub train_acc: f64,
    pub heldout_acc: f64,
}

struct Head(Dense);

impl ParamSet for Head {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("naive.weight", &self.0.weight), ("naive.bias", &self.0.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![("naive.weight", &mut self.0.weight), ("naive.bias", &mut self.0.bias)]
    }
}

fn invariant_coords(params: &ModelParams, basis: &Matrix, x: &Matrix) -> Matrix {
    params.bottleneck.apply(&params.base.features(x)).matmul(basis)
}

/// Fits the head full-batch with Adam from zero and reports accuracies.
pub fn naive_subspace_classifier(
    params: &ModelParams,
    basis: &Matrix,
    train: &DomainData,
    heldout: &DomainSet,
    steps: usize,
    lr: f64,
) -> Result<NaiveReport> {
    let rows: Vec<Vec<f64>> = train
        .domains
        .iter()
        .flat_map(|d| invariant_coords(params, basis, &d.x).to_rows())
        .collect();
    let u = Matrix::from_rows(&rows)?;
    let labels: Vec<usize> = train.domains.iter().flat_map(|d| d.y.iter().copied()).collect();
    let classes = params.base.classifier.weight.cols();
    let targets = super::forward::smoothed_targets(&labels, classes, 0.0);

    let mut head = Head(Dense::zeros(u.cols(), classes));
    let mut opt = Adam::new(lr, lr);
    for _ in 0..steps {
        let mut g = Graph::new();
        let w = g.input("naive.weight", u.cols(), classes)?;
        let b = g.input("naive.bias", 1, classes)?;
        let uv = g.constant(u.clone());
        let ones = g.constant(Matrix::filled(u.rows(), 1, 1.0));
        let uw = g.matmul(uv, w)?;
        let bias = g.matmul(ones, b)?;
        let logits = g.add(uw, bias)?;
        let t = g.constant(targets.clone());
        let loss = g.softmax_cross_entropy(logits, t)?;
        g.set_output(loss)?;
        let bindings: Bindings = head
            .tensors()
            .into_iter()
            .map(|(n, m)| (n.to_string(), m.clone()))
            .collect();
        g.evaluate(&bindings)?;
        let grads = g.backward()?;
        opt.step(&mut head, &grads, |_| false);
    }
    let test_u = invariant_coords(params, basis, &heldout.x);
    Ok(NaiveReport {
        train_acc: accuracy(&head.0.apply(&u), &labels),
        heldout_acc: accuracy(&head.0.apply(&test_u), &heldout.y),
    })
}
