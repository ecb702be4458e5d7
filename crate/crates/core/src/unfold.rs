//! Deep-unfolded CPCA solver.
//!
//! Each stage maps the current skew parameter `A` to a basis with the Cayley
//! retraction, takes the Riemannian gradient of the negative log-likelihood
//! in the Hadamard form `G_A = Σ_k n_k (βᵀS_kβ) ⊙ Ω_k`, normalises it by its
//! Frobenius norm and moves `A` by the stage's step size. Starting from
//! `A₀ = 0`, `T` stages give `β_T = cayley(A_T)`.
//!
//! Everything here exists twice: as direct matrix code (fast, and the source
//! of [`UnfoldTrace`]) and as [`tape`](crate::tape) graph fragments so that
//! gradients reach the covariances and the step sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fg::{negloglik_with_floor, DEFAULT_LAMBDA_FLOOR};
use crate::linalg::{
    cayley, offdiag_energy, CovarianceSet, Matrix, OrthogonalBasis, SkewMatrix,
};
use crate::tape::{offdiag_energy_node, Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct UnfoldConfig {
    pub stages: usize,
    /// Regulariser in the Ω denominator.
    pub eps: f64,
    /// Regulariser added to `‖G_A‖_F` before normalising.
    pub eps_norm: f64,
    /// Projection (bottleneck) dimension `d`.
    pub dim: usize,
}

impl Default for UnfoldConfig {
    fn default() -> Self {
        UnfoldConfig {
            stages: 3,
            eps: 1e-8,
            eps_norm: 1e-12,
            dim: 256,
        }
    }
}

impl UnfoldConfig {
    pub fn with_stages(stages: usize) -> Self {
        UnfoldConfig {
            stages,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::InvalidValue("need at least one unfolding stage".into()));
        }
        if !(self.eps > 0.0 && self.eps_norm > 0.0) {
            return Err(Error::InvalidValue(format!(
                "eps ({}) and eps_norm ({}) must be positive",
                self.eps, self.eps_norm
            )));
        }
        Ok(())
    }
}

/// Checks every step size lies strictly inside (0, 0.5).
pub fn check_etas(etas: &[f64]) -> Result<()> {
    if let Some((t, eta)) = etas
        .iter()
        .enumerate()
        .find(|(_, &e)| !(e > 0.0 && e < 0.5))
    {
        return Err(Error::InvalidValue(format!(
            "step size η_{} = {eta} outside (0, 0.5)",
            t + 1
        )));
    }
    Ok(())
}

/// One unfolded stage.
#[derive(Clone, Debug, Serialize)]
pub struct StageRecord {
    pub eta: f64,
    /// Frobenius norm of the raw gradient taken at the stage's starting basis.
    pub grad_norm: f64,
    /// Negative log-likelihood at the stage's resulting basis.
    pub objective: f64,
    /// Mean off-diagonal energy of the transformed covariances at that basis.
    pub offdiag: f64,
    #[serde(skip)]
    pub a: SkewMatrix,
    #[serde(skip)]
    pub beta: OrthogonalBasis,
}

#[derive(Clone, Debug, Serialize)]
pub struct UnfoldTrace {
    /// Objective and off-diagonal energy at `β₀ = I`.
    pub initial_objective: f64,
    pub initial_offdiag: f64,
    pub stages: Vec<StageRecord>,
}

impl UnfoldTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serialises")
    }

    pub fn final_offdiag(&self) -> f64 {
        self.stages.last().map_or(self.initial_offdiag, |s| s.offdiag)
    }
}

/// `[Ω]_{lm} = (λ_l − λ_m)/(λ_l λ_m + ε)`.
fn omega(lambda: &[f64], eps: f64) -> Matrix {
    let d = lambda.len();
    Matrix::from_fn(d, d, |l, m| (lambda[l] - lambda[m]) / (lambda[l] * lambda[m] + eps))
}

/// `G_A = Σ_k n_k (βᵀ S_k β) ⊙ Ω_k`, the Riemannian gradient of the
/// negative log-likelihood on 𝔰𝔬(d) with the constant factor 2 dropped.
pub fn riemannian_gradient(basis: &OrthogonalBasis, covs: &CovarianceSet, eps: f64) -> SkewMatrix {
    riemannian_gradient_raw(basis.as_matrix(), covs, eps)
}

fn riemannian_gradient_raw(basis: &Matrix, covs: &CovarianceSet, eps: f64) -> SkewMatrix {
    let d = basis.cols();
    let mut g = Matrix::zeros(d, d);
    for (hat, (_, n)) in covs.transformed(basis).iter().zip(covs.iter()) {
        let om = omega(&hat.diag(), eps);
        g.add_assign(&hat.hadamard(&om).scale(n));
    }
    // Ω is antisymmetric and βᵀSβ symmetric up to roundoff; fold the
    // residual so the output is skew to machine precision.
    SkewMatrix::skew_part(&g)
}

/// `L_CPCA = (1/K) Σ_k offdiag_energy(βᵀ S_k β)`.
pub fn cpca_loss(basis: &OrthogonalBasis, covs: &CovarianceSet) -> Result<f64> {
    cpca_loss_raw(basis.as_matrix(), covs)
}

fn cpca_loss_raw(basis: &Matrix, covs: &CovarianceSet) -> Result<f64> {
    let hats = covs.transformed(basis);
    let total: f64 = hats
        .iter()
        .map(offdiag_energy)
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(total / hats.len() as f64)
}

/// Runs `T = etas.len()` unfolded stages from `A₀ = 0`.
///
/// Stage `t` evaluates the gradient at `β_{t−1} = cayley(A_{t−1})`,
/// normalises it, and sets `A_t = A_{t−1} + η_t G̃`. With the retraction
/// `(I − A/2)(I + A/2)⁻¹ ≈ I − A`, this sign is the descent direction of the
/// negative log-likelihood.
pub fn unfold_solve(
    covs: &CovarianceSet,
    etas: &[f64],
    config: &UnfoldConfig,
) -> Result<(OrthogonalBasis, UnfoldTrace)> {
    config.validate()?;
    check_etas(etas)?;
    if etas.len() != config.stages {
        return Err(Error::InvalidValue(format!(
            "{} step sizes for {} stages",
            etas.len(),
            config.stages
        )));
    }
    let d = covs.dim();
    if d < 2 {
        return Err(Error::DimensionTooSmall { dim: d, min: 2 });
    }
    let mut a = SkewMatrix::zeros(d);
    let mut beta = OrthogonalBasis::identity(d);
    let initial_objective = negloglik_with_floor(beta.as_matrix(), covs, DEFAULT_LAMBDA_FLOOR);
    let initial_offdiag = cpca_loss_raw(beta.as_matrix(), covs)?;
    let mut stages = Vec::with_capacity(etas.len());
    for &eta in etas {
        let g = riemannian_gradient(&beta, covs, config.eps);
        let grad_norm = g.frobenius_norm();
        let step = g.scale(eta / (grad_norm + config.eps_norm));
        a = a.add(&step);
        beta = cayley(&a);
        stages.push(StageRecord {
            eta,
            grad_norm,
            objective: negloglik_with_floor(beta.as_matrix(), covs, DEFAULT_LAMBDA_FLOOR),
            offdiag: cpca_loss_raw(beta.as_matrix(), covs)?,
            a: a.clone(),
            beta: beta.clone(),
        });
    }
    Ok((
        beta,
        UnfoldTrace {
            initial_objective,
            initial_offdiag,
            stages,
        },
    ))
}

/// A domain covariance living in a graph, with its fixed weight `n_k`.
#[derive(Clone, Copy, Debug)]
pub struct CovNode {
    pub cov: Var,
    pub weight: f64,
}

/// Graph fragment for `βᵀ S β`.
pub fn transform_node(g: &mut Graph, beta: Var, s: Var) -> Result<Var> {
    let bt = g.transpose(beta)?;
    let sb = g.matmul(s, beta)?;
    g.matmul(bt, sb)
}

/// Graph fragment for [`riemannian_gradient`] (without the final skew fold).
pub fn riemannian_gradient_node(g: &mut Graph, beta: Var, covs: &[CovNode], eps: f64) -> Result<Var> {
    let (d, _) = g.shape(beta);
    let ones_row = g.constant(Matrix::filled(1, d, 1.0));
    let eps_mat = g.constant(Matrix::filled(d, d, eps));
    let mut total: Option<Var> = None;
    for c in covs {
        let hat = transform_node(g, beta, c.cov)?;
        let lam = g.diag_extract(hat)?;
        let rows = g.matmul(lam, ones_row)?; // [l, m] = λ_l
        let cols = g.transpose(rows)?; // [l, m] = λ_m
        let diff = g.sub(rows, cols)?;
        let lam_t = g.transpose(lam)?;
        let prod = g.matmul(lam, lam_t)?;
        let denom = g.add(prod, eps_mat)?;
        let inv = g.reciprocal(denom)?;
        let om = g.hadamard(diff, inv)?;
        let term = g.hadamard(hat, om)?;
        let term = g.scale(term, c.weight)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidValue("no covariances".into()))
}

/// Graph fragment for the Cayley retraction, solving `(I + A/2) β = (I − A/2)`.
pub fn cayley_node(g: &mut Graph, a: Var) -> Result<Var> {
    let (d, _) = g.shape(a);
    let eye = g.constant(Matrix::identity(d));
    let half = g.scale(a, 0.5)?;
    let plus = g.add(eye, half)?;
    let minus = g.sub(eye, half)?;
    g.linear_solve(plus, minus)
}

/// Output nodes of [`unfold_graph`].
#[derive(Clone, Debug)]
pub struct UnfoldNodes {
    pub beta: Var,
    /// `β_1 … β_T`.
    pub stage_bases: Vec<Var>,
}

/// Graph fragment for `T` unfolded stages; `etas` is a 1×T node.
pub fn unfold_graph(g: &mut Graph, covs: &[CovNode], etas: Var, config: &UnfoldConfig) -> Result<UnfoldNodes> {
    config.validate()?;
    let Some(first) = covs.first() else {
        return Err(Error::InvalidValue("no covariances".into()));
    };
    let (d, _) = g.shape(first.cov);
    let (er, ec) = g.shape(etas);
    if (er, ec) != (1, config.stages) {
        return Err(crate::error::shape_err(
            "unfold",
            format!("etas node is {er}x{ec}, expected 1x{}", config.stages),
        ));
    }
    let eps_norm = g.constant(Matrix::scalar(config.eps_norm));
    let mut a: Option<Var> = None;
    let mut beta = g.constant(Matrix::identity(d));
    let mut stage_bases = Vec::with_capacity(config.stages);
    for t in 0..config.stages {
        let grad = riemannian_gradient_node(g, beta, covs, config.eps)?;
        let norm = g.frobenius_norm(grad)?;
        let den = g.add(norm, eps_norm)?;
        let inv = g.reciprocal(den)?;
        let unit = g.scalar_mul(inv, grad)?;
        let mut pick = Matrix::zeros(config.stages, 1);
        pick[(t, 0)] = 1.0;
        let pick = g.constant(pick);
        let eta = g.matmul(etas, pick)?;
        let step = g.scalar_mul(eta, unit)?;
        let next = match a {
            Some(prev) => g.add(prev, step)?,
            None => step,
        };
        a = Some(next);
        beta = cayley_node(g, next)?;
        stage_bases.push(beta);
    }
    Ok(UnfoldNodes { beta, stage_bases })
}

/// Graph fragment for [`cpca_loss`].
pub fn cpca_loss_node(g: &mut Graph, beta: Var, covs: &[CovNode]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for c in covs {
        let hat = transform_node(g, beta, c.cov)?;
        let e = offdiag_energy_node(g, hat)?;
        total = Some(match total {
            Some(t) => g.add(t, e)?,
            None => e,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidValue("no covariances".into()))?;
    g.scale(total, 1.0 / covs.len() as f64)
}
