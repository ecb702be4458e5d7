use std::collections::BTreeMap;

use rand::Rng;

use super::params::{Architecture, ErmParams, ModelParams, ParamSet, HYPERNET_HIDDEN};
use crate::data::DomainBatch;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{CovarianceSet, Matrix, OrthogonalBasis};
use crate::tape::{sigmoid, Bindings, Graph, Var};
use crate::unfold::{cpca_loss_node, unfold_graph, CovNode, UnfoldConfig};

/// Weights of the two loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_cpca: f64,
    pub smoothing: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cpca >= 0.0 && self.lambda_cpca.is_finite()) {
            return Err(Error::InvalidValue(format!("lambda_cpca = {}", self.lambda_cpca)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::InvalidValue(format!(
                "label smoothing {} outside [0, 1)",
                self.smoothing
            )));
        }
        Ok(())
    }
}

/// Inverted-dropout masks for one training step; kept entries are `1/(1−rate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    pub hypernet: Matrix,
    pub gamma: Matrix,
    pub shift: Matrix,
}

impl DropoutMasks {
    pub fn sample(rate: f64, rows: usize, arch: &Architecture, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidValue(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mut draw = |r, c| Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < rate { 0.0 } else { keep });
        Ok(DropoutMasks {
            hypernet: draw(1, HYPERNET_HIDDEN),
            gamma: draw(rows, arch.feature_dim),
            shift: draw(rows, arch.feature_dim),
        })
    }
}

/// Result of a CPCANet forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub basis: OrthogonalBasis,
    /// Per-domain covariances of the bottleneck features, in domain order.
    pub covs: Vec<Matrix>,
    /// Their weights `n_k = N_k − 1`.
    pub cov_weights: Vec<f64>,
    pub etas: Vec<f64>,
    pub task_loss: f64,
    pub cpca_loss: f64,
    pub total_loss: f64,
}

/// Parameter tensors registered as graph inputs under their own names.
pub(crate) fn bind_params<P: ParamSet>(
    g: &mut Graph,
    params: &P,
    bindings: &mut Bindings,
) -> Result<BTreeMap<&'static str, Var>> {
    let mut vars = BTreeMap::new();
    for (name, m) in params.tensors() {
        vars.insert(name, g.input(name, m.rows(), m.cols())?);
        bindings.insert(name.to_string(), m.clone());
    }
    Ok(vars)
}

struct Layers<'a> {
    vars: &'a BTreeMap<&'static str, Var>,
}

impl Layers<'_> {
    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// `x W + 1 bᵀ` for the layer stored under `prefix`.
    fn dense(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let (rows, _) = g.shape(x);
        let w = self.var(&format!("{prefix}.weight"));
        let b = self.var(&format!("{prefix}.bias"));
        let xw = g.matmul(x, w)?;
        let ones = g.constant(Matrix::filled(rows, 1, 1.0));
        let bias = g.matmul(ones, b)?;
        g.add(xw, bias)
    }

    /// `relu(x W₁ + b₁) ⊙ mask`, then the output layer.
    fn mlp(&self, g: &mut Graph, x: Var, prefix: &str, mask: Option<&Matrix>) -> Result<Var> {
        let h = self.dense(g, x, &format!("{prefix}.hidden"))?;
        let mut h = g.relu(h)?;
        if let Some(mask) = mask {
            let m = g.constant(mask.clone());
            h = g.hadamard(h, m)?;
        }
        self.dense(g, h, &format!("{prefix}.out"))
    }
}

/// `(1−s)·onehot(y) + s/C`.
pub fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Matrix {
    let off = smoothing / classes as f64;
    Matrix::from_fn(labels.len(), classes, |i, c| {
        if labels[i] == c {
            1.0 - smoothing + off
        } else {
            off
        }
    })
}

/// Label-smoothed softmax cross-entropy averaged over rows.
pub fn task_loss(logits: &Matrix, labels: &[usize], smoothing: f64) -> f64 {
    let targets = smoothed_targets(labels, logits.cols(), smoothing);
    let mut total = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (c, v) in row.iter().enumerate() {
            total -= targets[(i, c)] * (v - lse);
        }
    }
    total / logits.rows() as f64
}

/// `L_task + λ_cpca·L_CPCA` for a finished forward pass.
pub fn total_loss(out: &ForwardOutput, labels: &[usize], loss: &LossConfig) -> Result<f64> {
    loss.validate()?;
    Ok(task_loss(&out.logits, labels, loss.smoothing) + loss.lambda_cpca * out.cpca_loss)
}

/// Nodes of interest in a CPCANet graph.
#[derive(Clone, Debug)]
pub struct CpcaNetNodes {
    pub features: Var,
    pub projected: Var,
    pub invariant: Var,
    pub modulated: Var,
    pub logits: Var,
    pub basis: Var,
    pub covs: Vec<CovNode>,
    pub etas: Var,
    pub task: Var,
    pub cpca: Var,
    pub total: Var,
}

/// A built, not yet evaluated, training graph with its parameter bindings.
pub struct NetGraph<N> {
    pub graph: Graph,
    pub bindings: Bindings,
    pub nodes: N,
}

impl<N> NetGraph<N> {
    pub fn evaluate(&mut self) -> Result<f64> {
        self.graph.evaluate(&self.bindings)
    }

    pub fn value(&self, v: Var) -> Result<&Matrix> {
        self.graph.value(v).ok_or(Error::NotEvaluated)
    }
}

/// Covariance nodes `S_k = Z_kᶜᵀ Z_kᶜ/(N_k − 1)` with centring folded into
/// a constant row-selection matrix.
pub(crate) fn domain_covariance_nodes(g: &mut Graph, z: Var, rows: &[Vec<usize>]) -> Result<Vec<CovNode>> {
    let (n, _) = g.shape(z);
    let mut out = Vec::with_capacity(rows.len());
    for (k, idx) in rows.iter().enumerate() {
        let nk = idx.len();
        if nk < 2 {
            return Err(Error::DegenerateBatch(format!("domain {k} has {nk} sample(s) in the batch")));
        }
        let inv = 1.0 / nk as f64;
        let mut center = Matrix::filled(nk, n, 0.0);
        for (r, &i) in idx.iter().enumerate() {
            for &j in idx {
                center[(r, j)] = if i == j { 1.0 - inv } else { -inv };
            }
        }
        let c = g.constant(center);
        let zc = g.matmul(c, z)?;
        let zct = g.transpose(zc)?;
        let gram = g.matmul(zct, zc)?;
        let weight = (nk - 1) as f64;
        out.push(CovNode {
            cov: g.scale(gram, 1.0 / weight)?,
            weight,
        });
    }
    Ok(out)
}

/// Hypernetwork on the concatenated flattened covariances: `η = σ(H_φ(·))/2`.
pub(crate) fn hypernet_node(
    g: &mut Graph,
    vars: &BTreeMap<&'static str, Var>,
    covs: &[CovNode],
    mask: Option<&Matrix>,
) -> Result<Var> {
    let parts = covs
        .iter()
        .map(|c| {
            let (d, _) = g.shape(c.cov);
            g.reshape(c.cov, 1, d * d)
        })
        .collect::<Result<Vec<_>>>()?;
    let input = g.concat_cols(&parts)?;
    let raw = Layers { vars }.mlp(g, input, "hypernet", mask)?;
    let s = g.sigmoid(raw)?;
    g.scale(s, 0.5)
}

/// `f ⊙ 2σ(MLP_γ(u)) + MLP_Δf(u)`, row-wise.
pub(crate) fn modulate_node(
    g: &mut Graph,
    vars: &BTreeMap<&'static str, Var>,
    f: Var,
    u: Var,
    masks: Option<&DropoutMasks>,
) -> Result<Var> {
    let layers = Layers { vars };
    let graw = layers.mlp(g, u, "gamma", masks.map(|m| &m.gamma))?;
    let gs = g.sigmoid(graw)?;
    let gamma = g.scale(gs, 2.0)?;
    let shift = layers.mlp(g, u, "shift", masks.map(|m| &m.shift))?;
    let scaled = g.hadamard(f, gamma)?;
    g.add(scaled, shift)
}

pub(crate) fn unfold_config(arch: &Architecture) -> UnfoldConfig {
    UnfoldConfig {
        stages: arch.stages,
        dim: arch.proj_dim,
        ..UnfoldConfig::default()
    }
}

/// Builds the full CPCANet training graph for one batch.
pub fn build_cpcanet_graph(
    params: &ModelParams,
    batch: &DomainBatch,
    arch: &Architecture,
    loss: &LossConfig,
    masks: Option<&DropoutMasks>,
) -> Result<NetGraph<CpcaNetNodes>> {
    arch.validate()?;
    loss.validate()?;
    params.check_shapes(arch)?;
    batch.validate(arch.domains, arch.classes)?;
    if batch.x.cols() != arch.input_dim {
        return Err(shape_err(
            "cpcanet forward",
            format!("batch has {} features, model expects {}", batch.x.cols(), arch.input_dim),
        ));
    }
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let vars = bind_params(&mut g, params, &mut bindings)?;
    let layers = Layers { vars: &vars };

    let x = g.constant(batch.x.clone());
    let features = layers.mlp(&mut g, x, "backbone", None)?;
    let projected = layers.dense(&mut g, features, "bottleneck")?;
    let covs = domain_covariance_nodes(&mut g, projected, &batch.domain_rows(arch.domains))?;
    let etas = hypernet_node(&mut g, &vars, &covs, masks.map(|m| &m.hypernet))?;
    let unfolded = unfold_graph(&mut g, &covs, etas, &unfold_config(arch))?;
    let basis = unfolded.beta;
    let invariant = g.matmul(projected, basis)?;
    let modulated = modulate_node(&mut g, &vars, features, invariant, masks)?;
    let logits = layers.dense(&mut g, modulated, "classifier")?;

    let targets = g.constant(smoothed_targets(&batch.labels, arch.classes, loss.smoothing));
    let task = g.softmax_cross_entropy(logits, targets)?;
    let cpca = cpca_loss_node(&mut g, basis, &covs)?;
    let weighted = g.scale(cpca, loss.lambda_cpca)?;
    let total = g.add(task, weighted)?;
    g.set_output(total)?;
    Ok(NetGraph {
        graph: g,
        bindings,
        nodes: CpcaNetNodes {
            features,
            projected,
            invariant,
            modulated,
            logits,
            basis,
            covs,
            etas,
            task,
            cpca,
            total,
        },
    })
}

impl NetGraph<CpcaNetNodes> {
    /// Collects a [`ForwardOutput`] after [`NetGraph::evaluate`].
    pub fn output(&self) -> Result<ForwardOutput> {
        let n = &self.nodes;
        let scalar = |v: Var| self.value(v).map(Matrix::as_scalar);
        Ok(ForwardOutput {
            logits: self.value(n.logits)?.clone(),
            basis: OrthogonalBasis::from_matrix_unchecked(self.value(n.basis)?.clone()),
            covs: n
                .covs
                .iter()
                .map(|c| self.value(c.cov).cloned())
                .collect::<Result<_>>()?,
            cov_weights: n.covs.iter().map(|c| c.weight).collect(),
            etas: self.value(n.etas)?.as_slice().to_vec(),
            task_loss: scalar(n.task)?,
            cpca_loss: scalar(n.cpca)?,
            total_loss: scalar(n.total)?,
        })
    }
}

/// Evaluation-mode forward pass (no dropout).
pub fn cpcanet_forward(
    batch: &DomainBatch,
    params: &ModelParams,
    arch: &Architecture,
    loss: &LossConfig,
) -> Result<ForwardOutput> {
    let mut net = build_cpcanet_graph(params, batch, arch, loss, None)?;
    net.evaluate()?;
    net.output()
}

/// Nodes of the plain backbone + classifier graph.
#[derive(Clone, Copy, Debug)]
pub struct ErmNodes {
    pub features: Var,
    pub logits: Var,
    pub task: Var,
}

pub fn build_erm_graph(
    params: &ErmParams,
    x: &Matrix,
    labels: &[usize],
    classes: usize,
    smoothing: f64,
) -> Result<NetGraph<ErmNodes>> {
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let vars = bind_params(&mut g, params, &mut bindings)?;
    let layers = Layers { vars: &vars };
    let xv = g.constant(x.clone());
    let features = layers.mlp(&mut g, xv, "backbone", None)?;
    let logits = layers.dense(&mut g, features, "classifier")?;
    let targets = g.constant(smoothed_targets(labels, classes, smoothing));
    let task = g.softmax_cross_entropy(logits, targets)?;
    g.set_output(task)?;
    Ok(NetGraph {
        graph: g,
        bindings,
        nodes: ErmNodes {
            features,
            logits,
            task,
        },
    })
}

/// Step sizes the hypernetwork emits for `covs` (no dropout).
pub fn hypernet_step_sizes(covs: &CovarianceSet, params: &ModelParams, arch: &Architecture) -> Result<Vec<f64>> {
    if covs.len() != arch.domains {
        return Err(Error::WrongDomainCount {
            expected: arch.domains,
            found: covs.len(),
        });
    }
    if covs.dim() != arch.proj_dim {
        return Err(shape_err(
            "hypernet",
            format!("covariances are {0}x{0}, expected d = {1}", covs.dim(), arch.proj_dim),
        ));
    }
    let input: Vec<f64> = covs.iter().flat_map(|(s, _)| s.as_slice().to_vec()).collect();
    let raw = params.hypernet.apply(&Matrix::row_vector(&input));
    Ok(raw.as_slice().iter().map(|&v| 0.5 * sigmoid(v)).collect())
}

/// `f ⊙ 2σ(MLP_γ(u)) + MLP_Δf(u)` on plain matrices (no dropout).
pub fn modulate(f: &Matrix, u: &Matrix, params: &ModelParams) -> Result<Matrix> {
    if f.rows() != u.rows() || f.cols() != params.gamma.out.weight.cols() || u.cols() != params.gamma.hidden.weight.rows() {
        return Err(shape_err(
            "modulate",
            format!("f is {:?}, u is {:?}", f.shape(), u.shape()),
        ));
    }
    let gamma = params.gamma.apply(u).map(|v| 2.0 * sigmoid(v));
    let shift = params.shift.apply(u);
    Ok(f.hadamard(&gamma).add(&shift))
}

/// Inference logits with a fixed basis.
pub fn predict_logits(params: &ModelParams, basis: &Matrix, x: &Matrix) -> Result<Matrix> {
    let f = params.base.features(x);
    let u = params.bottleneck.apply(&f).matmul(basis);
    let modulated = modulate(&f, &u, params)?;
    Ok(params.base.classifier.apply(&modulated))
}

/// Row-wise argmax.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}
