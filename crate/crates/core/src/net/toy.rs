use serde::{Deserialize, Serialize};

use super::train::{train, MetricsLog, Pipeline, TrainOutcome, TrainerConfig};
use crate::data::{gen_toy_dg, DomainData, DomainSet, ToyDGDataset, ToyDgParams};
use crate::error::{Error, Result};

/// Rows generated per domain by [`benchmark_params`].
pub const BENCHMARK_ROWS_PER_DOMAIN: usize = 600;
/// Rows of each training domain kept aside for in-domain accuracy.
pub const BENCHMARK_TEST_ROWS: usize = 200;

/// Toy dataset parameters of the benchmark at the given spurious strength.
pub fn benchmark_params(spurious_strength: f64) -> ToyDgParams {
    ToyDgParams {
        n_per_domain: BENCHMARK_ROWS_PER_DOMAIN,
        spurious_strength,
        ..ToyDgParams::default()
    }
}

/// Accuracy and regularizer summary of one toy domain-generalization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub pipeline: Pipeline,
    pub seed: u64,
    /// Mean accuracy over the held-back rows of the training domains.
    pub in_domain_acc: f64,
    pub heldout_acc: f64,
    /// `L_CPCA` on the first and last training batch (CPCANet only).
    pub cpca_initial: Option<f64>,
    pub cpca_final: Option<f64>,
    #[serde(skip)]
    pub log: MetricsLog,
}

impl ToyRun {
    pub fn heldout_gap(&self) -> f64 {
        self.in_domain_acc - self.heldout_acc
    }
}

/// Training pools plus in-domain test rows, cut from a generated dataset.
#[derive(Clone, Debug)]
pub struct ToySplit {
    pub train: DomainData,
    pub in_domain_test: Vec<DomainSet>,
    pub heldout: DomainSet,
}

/// Generates the toy dataset for `seed` and keeps the last `test_per_domain`
/// rows of every training domain aside for in-domain evaluation.
pub fn toy_split(params: &ToyDgParams, seed: u64, test_per_domain: usize) -> Result<ToySplit> {
    ToySplit::from_dataset(&gen_toy_dg(params, seed)?, test_per_domain)
}

impl ToySplit {
    pub fn from_dataset(ds: &ToyDGDataset, test_per_domain: usize) -> Result<ToySplit> {
        let mut train_sets = Vec::new();
        let mut tests = Vec::new();
        for dom in ds.train_domains() {
            let n = dom.y.len();
            if test_per_domain == 0 || test_per_domain >= n {
                return Err(Error::InvalidValue(format!(
                    "test rows per domain must lie in 1..{n}, got {test_per_domain}"
                )));
            }
            let (tr, te) = dom.split(n - test_per_domain)?;
            train_sets.push(tr);
            tests.push(te);
        }
        Ok(ToySplit {
            train: DomainData { domains: train_sets },
            in_domain_test: tests,
            heldout: ds.heldout_domain().clone(),
        })
    }
}

/// Trains `pipeline` on the toy split and evaluates it. The dataset seed is
/// `config.seed`, so ERM and CPCANet runs with one config see the same data.
pub fn run_toy(
    pipeline: Pipeline,
    params: &ToyDgParams,
    test_per_domain: usize,
    config: &TrainerConfig,
) -> Result<ToyRun> {
    let split = toy_split(params, config.seed, test_per_domain)?;
    evaluate_on_split(pipeline, &split, config)
}

pub fn evaluate_on_split(pipeline: Pipeline, split: &ToySplit, config: &TrainerConfig) -> Result<ToyRun> {
    let TrainOutcome { model, log } = train(pipeline, &split.train, Some(&split.heldout), config)?;
    let mut acc = 0.0;
    for dom in &split.in_domain_test {
        acc += model.accuracy(dom)?;
    }
    let in_domain_acc = acc / split.in_domain_test.len() as f64;
    let heldout_acc = model.accuracy(&split.heldout)?;
    Ok(ToyRun {
        pipeline,
        seed: config.seed,
        in_domain_acc,
        heldout_acc,
        cpca_initial: log.rows.first().and_then(|r| r.cpca_loss),
        cpca_final: log.rows.last().and_then(|r| r.cpca_loss),
        log,
    })
}

/// Median of a non-empty slice (mean of the middle pair for even length).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
