use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::toy::{run_toy, ToyRun};
use super::train::{Pipeline, TrainerConfig};
use crate::data::ToyDgParams;
use crate::error::{Error, Result};
use crate::linalg::io::fmt_f64;

/// Grid over projection dimension and stage count, each cell trained on
/// `seeds` consecutive seeds starting at `base.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SweepConfig {
    pub dims: Vec<usize>,
    pub stages: Vec<usize>,
    pub seeds: usize,
    /// Rows per training domain kept aside for in-domain accuracy.
    pub test_rows: usize,
    pub base: TrainerConfig,
    pub data: ToyDgParams,
}

impl Default for SweepConfig {
    /// The grid of the reference hyperparameter study (d up to 512, T up to
    /// 6). At toy scale the large-d cells are slow; pass a smaller grid for
    /// quick runs.
    fn default() -> Self {
        SweepConfig {
            dims: vec![64, 128, 256, 512],
            stages: (1..=6).collect(),
            seeds: 3,
            test_rows: 100,
            base: TrainerConfig::toy_benchmark(),
            data: ToyDgParams::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.stages.is_empty() || self.seeds == 0 {
            return Err(Error::InvalidValue("sweep needs at least one d, one T and one seed".into()));
        }
        for &d in &self.dims {
            if d < 2 {
                return Err(Error::DimensionTooSmall { dim: d, min: 2 });
            }
        }
        if self.stages.contains(&0) {
            return Err(Error::InvalidValue("stage counts must be positive".into()));
        }
        self.base.validate()
    }

    fn cell_config(&self, d: usize, t: usize, seed_index: usize) -> TrainerConfig {
        TrainerConfig {
            proj_dim: d,
            stages: t,
            seed: self.base.seed + seed_index as u64,
            ..self.base.clone()
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.is_finite() && self.std.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub d: usize,
    pub stages: usize,
    pub seeds: usize,
    pub heldout_acc: MeanStd,
    pub in_domain_acc: MeanStd,
    pub final_task_loss: MeanStd,
    pub final_cpca_loss: MeanStd,
}

/// Trains CPCANet for every (d, T, seed) in parallel and aggregates per cell.
/// Cells are ordered by d, then T.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<SweepCell>> {
    config.validate()?;
    let jobs: Vec<(usize, usize, usize)> = config
        .dims
        .iter()
        .flat_map(|&d| config.stages.iter().flat_map(move |&t| (0..config.seeds).map(move |s| (d, t, s))))
        .collect();
    let runs: Vec<ToyRun> = jobs
        .par_iter()
        .map(|&(d, t, s)| run_toy(Pipeline::CpcaNet, &config.data, config.test_rows, &config.cell_config(d, t, s)))
        .collect::<Result<_>>()?;

    Ok(runs
        .chunks(config.seeds)
        .zip(jobs.chunks(config.seeds))
        .map(|(cell, job)| {
            let collect = |f: &dyn Fn(&ToyRun) -> f64| MeanStd::of(&cell.iter().map(f).collect::<Vec<_>>());
            SweepCell {
                d: job[0].0,
                stages: job[0].1,
                seeds: config.seeds,
                heldout_acc: collect(&|r| r.heldout_acc),
                in_domain_acc: collect(&|r| r.in_domain_acc),
                final_task_loss: collect(&|r| r.log.rows.last().map_or(f64::NAN, |row| row.task_loss)),
                final_cpca_loss: collect(&|r| r.cpca_final.unwrap_or(f64::NAN)),
            }
        })
        .collect())
}

pub const SWEEP_HEADER: [&str; 11] = [
    "d",
    "T",
    "seeds",
    "heldout_acc_mean",
    "heldout_acc_std",
    "in_domain_acc_mean",
    "in_domain_acc_std",
    "L_task_mean",
    "L_task_std",
    "L_CPCA_mean",
    "L_CPCA_std",
];

pub fn write_sweep_csv<W: Write>(cells: &[SweepCell], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SWEEP_HEADER)?;
    for c in cells {
        let mut rec = vec![c.d.to_string(), c.stages.to_string(), c.seeds.to_string()];
        for m in [c.heldout_acc, c.in_domain_acc, c.final_task_loss, c.final_cpca_loss] {
            rec.push(fmt_f64(m.mean));
            rec.push(fmt_f64(m.std));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
