use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{
    accuracy, build_cpcanet_graph, build_erm_graph, predict_logits, DropoutMasks, LossConfig,
};
use super::optim::Adam;
use super::params::{Architecture, ErmParams, ModelParams};
use crate::data::{DomainData, DomainSet};
use crate::error::{Error, Result};
use crate::linalg::{io::fmt_f64, orthogonality_error, Matrix};

/// Trainer settings; keys follow the on-disk config format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub p: usize,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    #[serde(rename = "d")]
    pub proj_dim: usize,
    #[serde(rename = "T")]
    pub stages: usize,
    #[serde(rename = "K")]
    pub domains: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub batch_per_domain: usize,
    pub steps: usize,
    pub lr_backbone: f64,
    pub lr_cpcanet: f64,
    pub lambda_cpca: f64,
    pub smoothing: f64,
    pub dropout: f64,
    pub seed: u64,
    pub eval_interval: usize,
    /// Keep the modulation heads at their initial values.
    pub freeze_modulation: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            p: 20,
            feature_dim: 32,
            proj_dim: 8,
            stages: 3,
            domains: 2,
            classes: 4,
            batch_per_domain: 32,
            steps: 2000,
            lr_backbone: 1e-5,
            lr_cpcanet: 1e-4,
            lambda_cpca: 5e-3,
            smoothing: 0.1,
            dropout: 0.5,
            seed: 0,
            eval_interval: 100,
            freeze_modulation: false,
        }
    }
}

impl TrainerConfig {
    /// Defaults with both learning rates raised a hundredfold (same ratio),
    /// so a randomly initialized toy backbone trains within 2000 steps.
    pub fn toy_benchmark() -> Self {
        TrainerConfig {
            lr_backbone: 1e-3,
            lr_cpcanet: 1e-2,
            ..Default::default()
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.p,
            feature_dim: self.feature_dim,
            proj_dim: self.proj_dim,
            stages: self.stages,
            domains: self.domains,
            classes: self.classes,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_cpca: self.lambda_cpca,
            smoothing: self.smoothing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        self.loss().validate()?;
        if self.batch_per_domain < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch-per-domain must be ≥ 2, got {}",
                self.batch_per_domain
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidValue(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for (name, lr) in [("lr-backbone", self.lr_backbone), ("lr-cpcanet", self.lr_cpcanet)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidValue(format!("{name} = {lr}")));
            }
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidValue("eval-interval must be positive".into()));
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed. The ERM baseline uses
/// only the shared ones, so CPCANet draws never shift its trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    SharedInit = 0,
    Batches = 1,
    CpcaNetInit = 2,
    Dropout = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn sampler_seed(seed: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, Stream::Batches).next_u64()
}

pub fn init_erm(config: &TrainerConfig) -> ErmParams {
    ErmParams::init(&config.architecture(), &mut stream_rng(config.seed, Stream::SharedInit))
}

pub fn init_cpcanet(config: &TrainerConfig) -> ModelParams {
    ModelParams::init(
        &config.architecture(),
        &mut stream_rng(config.seed, Stream::SharedInit),
        &mut stream_rng(config.seed, Stream::CpcaNetInit),
    )
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub task_loss: f64,
    pub cpca_loss: Option<f64>,
    pub total_loss: f64,
    /// `‖βᵀβ − I‖_F` of this step's basis (CPCANet only).
    pub basis_orthogonality: Option<f64>,
    /// Step sizes emitted at this step (empty for ERM).
    pub etas: Vec<f64>,
    pub heldout_acc: Option<f64>,
}

impl MetricsRow {
    pub fn eta_mean(&self) -> Option<f64> {
        (!self.etas.is_empty()).then(|| self.etas.iter().sum::<f64>() / self.etas.len() as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub const HEADER: [&'static str; 5] = ["step", "L_task", "L_CPCA", "eta_mean", "heldout_acc"];

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::HEADER)?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                fmt_f64(r.task_loss),
                opt(r.cpca_loss),
                opt(r.eta_mean()),
                opt(r.heldout_acc),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last_heldout_acc(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.heldout_acc)
    }

    pub fn all_etas(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flat_map(|r| r.etas.iter().copied())
    }
}

/// A trained network ready for prediction.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    /// CPCANet with the basis from its last training batch, used at inference.
    CpcaNet { params: ModelParams, basis: Matrix },
    Erm(ErmParams),
}

impl TrainedModel {
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            TrainedModel::CpcaNet { params, basis } => predict_logits(params, basis, x),
            TrainedModel::Erm(p) => Ok(p.logits(x)),
        }
    }

    pub fn accuracy(&self, set: &DomainSet) -> Result<f64> {
        Ok(accuracy(&self.logits(&set.x)?, &set.y))
    }

    pub fn backbone(&self) -> &ErmParams {
        match self {
            TrainedModel::CpcaNet { params, .. } => &params.base,
            TrainedModel::Erm(p) => p,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: MetricsLog,
}

/// Which network to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    CpcaNet,
    Erm,
}

/// Initialises from `config.seed` and trains the chosen pipeline.
pub fn train(
    pipeline: Pipeline,
    data: &DomainData,
    heldout: Option<&DomainSet>,
    config: &TrainerConfig,
) -> Result<TrainOutcome> {
    match pipeline {
        Pipeline::CpcaNet => train_cpcanet(init_cpcanet(config), data, heldout, config),
        Pipeline::Erm => train_erm(init_erm(config), data, heldout, config),
    }
}

fn check_data(data: &DomainData, config: &TrainerConfig) -> Result<()> {
    config.validate()?;
    if data.num_domains() != config.domains {
        return Err(Error::WrongDomainCount {
            expected: config.domains,
            found: data.num_domains(),
        });
    }
    Ok(())
}

fn is_eval_step(step: usize, config: &TrainerConfig) -> bool {
    (step + 1) % config.eval_interval == 0 || step + 1 == config.steps
}

fn is_modulation(name: &str) -> bool {
    name.starts_with("gamma.") || name.starts_with("shift.")
}

fn ensure_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!("{what} is {v} at step {step}")))
    }
}

pub fn train_cpcanet(
    mut params: ModelParams,
    data: &DomainData,
    heldout: Option<&DomainSet>,
    config: &TrainerConfig,
) -> Result<TrainOutcome> {
    check_data(data, config)?;
    let arch = config.architecture();
    params.check_shapes(&arch)?;
    let loss = config.loss();
    let mut batches = data.sampler(config.batch_per_domain, sampler_seed(config.seed))?;
    let mut dropout_rng = stream_rng(config.seed, Stream::Dropout);
    let mut opt = Adam::new(config.lr_backbone, config.lr_cpcanet);
    let mut basis = Matrix::identity(arch.proj_dim);
    let mut log = MetricsLog::default();
    for step in 0..config.steps {
        let batch = batches.next().expect("sampler is infinite");
        let masks = if config.dropout > 0.0 {
            Some(DropoutMasks::sample(config.dropout, batch.x.rows(), &arch, &mut dropout_rng)?)
        } else {
            None
        };
        let mut net = build_cpcanet_graph(&params, &batch, &arch, &loss, masks.as_ref())?;
        let total = net.evaluate()?;
        ensure_finite(step, "L_total", total)?;
        let grads = net.graph.backward()?;
        let n = &net.nodes;
        let task_loss = net.value(n.task)?.as_scalar();
        let cpca_loss = net.value(n.cpca)?.as_scalar();
        let etas = net.value(n.etas)?.as_slice().to_vec();
        basis = net.value(n.basis)?.clone();
        opt.step(&mut params, &grads, |name| config.freeze_modulation && is_modulation(name));

        let heldout_acc = match heldout {
            Some(set) if is_eval_step(step, config) => {
                Some(accuracy(&predict_logits(&params, &basis, &set.x)?, &set.y))
            }
            _ => None,
        };
        log.rows.push(MetricsRow {
            step,
            task_loss,
            cpca_loss: Some(cpca_loss),
            total_loss: total,
            basis_orthogonality: Some(orthogonality_error(&basis)),
            etas,
            heldout_acc,
        });
    }
    Ok(TrainOutcome {
        model: TrainedModel::CpcaNet { params, basis },
        log,
    })
}

pub fn train_erm(
    mut params: ErmParams,
    data: &DomainData,
    heldout: Option<&DomainSet>,
    config: &TrainerConfig,
) -> Result<TrainOutcome> {
    check_data(data, config)?;
    let mut batches = data.sampler(config.batch_per_domain, sampler_seed(config.seed))?;
    let mut opt = Adam::new(config.lr_backbone, config.lr_cpcanet);
    let mut log = MetricsLog::default();
    for step in 0..config.steps {
        let batch = batches.next().expect("sampler is infinite");
        batch.validate(config.domains, config.classes)?;
        let mut net = build_erm_graph(&params, &batch.x, &batch.labels, config.classes, config.smoothing)?;
        let task_loss = net.evaluate()?;
        ensure_finite(step, "L_task", task_loss)?;
        let grads = net.graph.backward()?;
        opt.step(&mut params, &grads, |_| false);
        let heldout_acc = match heldout {
            Some(set) if is_eval_step(step, config) => Some(accuracy(&params.logits(&set.x), &set.y)),
            _ => None,
        };
        log.rows.push(MetricsRow {
            step,
            task_loss,
            cpca_loss: None,
            total_loss: task_loss,
            basis_orthogonality: None,
            etas: Vec::new(),
            heldout_acc,
        });
    }
    Ok(TrainOutcome {
        model: TrainedModel::Erm(params),
        log,
    })
}
