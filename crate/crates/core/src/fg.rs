//! Flury–Gautschi style estimator of the common principal components:
//! sweeps of pairwise plane rotations driven by the maximum-likelihood
//! stationarity conditions, plus the stationarity residual and the
//! negative log-likelihood it minimises.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CovarianceSet, Matrix, OrthogonalBasis};

pub const DEFAULT_LAMBDA_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct FgConfig {
    /// Convergence threshold on the largest rotation angle of a sweep (radians).
    pub tol: f64,
    pub max_sweeps: usize,
    pub lambda_floor: f64,
}

impl Default for FgConfig {
    fn default() -> Self {
        FgConfig {
            tol: 1e-10,
            max_sweeps: 100,
            lambda_floor: DEFAULT_LAMBDA_FLOOR,
        }
    }
}

impl FgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidValue(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidValue("max_sweeps must be at least 1".into()));
        }
        if !(self.lambda_floor > 0.0) {
            return Err(Error::InvalidValue(format!(
                "lambda_floor must be positive, got {}",
                self.lambda_floor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FgResult {
    pub basis: OrthogonalBasis,
    /// `lambdas[k][l] = [βᵀ S_k β]_{ll}`.
    pub lambdas: Vec<Vec<f64>>,
    pub sweeps_used: usize,
    pub final_max_rotation: f64,
    pub residual: f64,
    converged: bool,
}

impl FgResult {
    pub fn converged(&self) -> bool {
        self.converged
    }

    /// `{"beta": [[...]], "lambdas": [[...]], "sweeps": int, "residual": float}`.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            beta: Vec<Vec<f64>>,
            lambdas: &'a [Vec<f64>],
            sweeps: usize,
            residual: f64,
        }
        serde_json::to_string_pretty(&Doc {
            beta: self.basis.to_rows(),
            lambdas: &self.lambdas,
            sweeps: self.sweeps_used,
            residual: self.residual,
        })
        .expect("fg result serialises")
    }
}

/// Pairwise ML weight `n_k (λ_l − λ_m)/(λ_l λ_m + floor)`.
#[inline]
fn pair_weight(n: f64, ll: f64, lm: f64, floor: f64) -> f64 {
    n * (ll - lm) / (ll * lm + floor)
}

/// Rotation angle in (−π/4, π/4] that zeroes the off-diagonal of the
/// symmetric 2×2 matrix `[[a, b], [b, c]]` under `[[cos, −sin], [sin, cos]]`.
fn jacobi_angle(a: f64, b: f64, c: f64) -> f64 {
    if b == 0.0 {
        return 0.0;
    }
    let mut theta = 0.5 * (2.0 * b).atan2(a - c);
    let quarter = std::f64::consts::FRAC_PI_4;
    if theta > quarter {
        theta -= 2.0 * quarter;
    } else if theta <= -quarter {
        theta += 2.0 * quarter;
    }
    theta
}

/// Rotates columns `l` and `m` of `x`: `x_l ← c·x_l + s·x_m`, `x_m ← −s·x_l + c·x_m`.
fn rotate_columns(x: &mut Matrix, l: usize, m: usize, c: f64, s: f64) {
    for i in 0..x.rows() {
        let a = x[(i, l)];
        let b = x[(i, m)];
        x[(i, l)] = c * a + s * b;
        x[(i, m)] = -s * a + c * b;
    }
}

fn rotate_rows(x: &mut Matrix, l: usize, m: usize, c: f64, s: f64) {
    for j in 0..x.cols() {
        let a = x[(l, j)];
        let b = x[(m, j)];
        x[(l, j)] = c * a + s * b;
        x[(m, j)] = -s * a + c * b;
    }
}

/// Estimates the common orthogonal basis of `covs`.
///
/// Each sweep visits the pairs `(l, m)`, `l < m`, in lexicographic order.
/// For each pair the variances are re-read from the current basis, the
/// 2×2 matrix `[β_l β_m]ᵀ (Σ_k w_k S_k) [β_l β_m]` is formed with the ML
/// weights `w_k`, and the pair is rotated by the closest-to-identity
/// rotation that diagonalises it. Iteration stops when a sweep's largest
/// angle falls below `config.tol`.
///
/// Columns are returned in descending order of `Σ_k n_k λ_kl`, each with
/// its largest-magnitude entry positive; if that leaves `det β = −1` the
/// last column is negated. A run that exhausts `max_sweeps` is still
/// returned, with [`FgResult::converged`] false.
pub fn fg_fit(covs: &CovarianceSet, config: &FgConfig) -> Result<FgResult> {
    config.validate()?;
    let d = covs.dim();
    if d < 2 {
        return Err(Error::DimensionTooSmall { dim: d, min: 2 });
    }
    let weights: Vec<f64> = covs.iter().map(|(_, n)| n).collect();
    let mut basis = Matrix::identity(d);
    // Running βᵀ S_k β, kept in step with the rotations.
    let mut hats: Vec<Matrix> = covs.iter().map(|(s, _)| s.clone()).collect();

    let mut sweeps_used = 0;
    let mut max_rotation = f64::INFINITY;
    for _ in 0..config.max_sweeps {
        sweeps_used += 1;
        max_rotation = 0.0f64;
        for l in 0..d {
            for m in l + 1..d {
                let (mut h11, mut h12, mut h22) = (0.0, 0.0, 0.0);
                for (hat, &n) in hats.iter().zip(&weights) {
                    let (ll, lm) = (hat[(l, l)], hat[(m, m)]);
                    let w = pair_weight(n, ll, lm, config.lambda_floor);
                    h11 += w * ll;
                    h12 += w * hat[(l, m)];
                    h22 += w * lm;
                }
                let theta = jacobi_angle(h11, h12, h22);
                if theta == 0.0 {
                    continue;
                }
                max_rotation = max_rotation.max(theta.abs());
                let (s, c) = theta.sin_cos();
                rotate_columns(&mut basis, l, m, c, s);
                for hat in &mut hats {
                    rotate_columns(hat, l, m, c, s);
                    rotate_rows(hat, l, m, c, s);
                    let sym = 0.5 * (hat[(l, m)] + hat[(m, l)]);
                    hat[(l, m)] = sym;
                    hat[(m, l)] = sym;
                }
            }
        }
        if max_rotation < config.tol {
            break;
        }
    }

    let basis = canonicalize(basis, covs);
    let lambdas = transformed_variances(&basis, covs);
    let residual = ml_residual_with_floor(&basis, covs, config.lambda_floor);
    let converged = max_rotation < config.tol;
    Ok(FgResult {
        basis,
        lambdas,
        sweeps_used,
        final_max_rotation: max_rotation,
        residual,
        converged,
    })
}

/// Column order by descending weighted variance, sign by positive
/// largest-magnitude entry, then a det fix on the last column.
fn canonicalize(basis: Matrix, covs: &CovarianceSet) -> OrthogonalBasis {
    let d = basis.cols();
    let lambdas = transformed_variances_raw(&basis, covs);
    let score: Vec<f64> = (0..d)
        .map(|l| {
            covs.iter()
                .zip(&lambdas)
                .map(|((_, n), lam)| n * lam[l])
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));

    let mut out = Matrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = basis.column_values(src);
        let lead = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, *v) } else { best })
            .0;
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        out.set_column(dst, &col);
    }
    if crate::linalg::det(&out).unwrap_or(1.0) < 0.0 {
        for i in 0..d {
            out[(i, d - 1)] = -out[(i, d - 1)];
        }
    }
    OrthogonalBasis::from_matrix_unchecked(out)
}

fn transformed_variances_raw(basis: &Matrix, covs: &CovarianceSet) -> Vec<Vec<f64>> {
    covs.transformed(basis).iter().map(Matrix::diag).collect()
}

/// `λ_kl = [βᵀ S_k β]_{ll}` for every domain.
pub fn transformed_variances(basis: &OrthogonalBasis, covs: &CovarianceSet) -> Vec<Vec<f64>> {
    transformed_variances_raw(basis.as_matrix(), covs)
}

/// Largest violation of the ML stationarity conditions,
/// `max_{l≠m} |β_lᵀ (Σ_k n_k (λ_kl − λ_km)/(λ_kl λ_km + floor) S_k) β_m|`,
/// with the default λ floor.
pub fn ml_residual(basis: &OrthogonalBasis, covs: &CovarianceSet) -> f64 {
    ml_residual_with_floor(basis, covs, DEFAULT_LAMBDA_FLOOR)
}

pub fn ml_residual_with_floor(basis: &OrthogonalBasis, covs: &CovarianceSet, floor: f64) -> f64 {
    let d = basis.dim();
    let hats = covs.transformed(basis.as_matrix());
    let mut worst = 0.0f64;
    for l in 0..d {
        for m in 0..d {
            if l == m {
                continue;
            }
            let v: f64 = hats
                .iter()
                .zip(covs.iter())
                .map(|(hat, (_, n))| pair_weight(n, hat[(l, l)], hat[(m, m)], floor) * hat[(l, m)])
                .sum();
            worst = worst.max(v.abs());
        }
    }
    worst
}

/// `J(β) = Σ_k n_k Σ_l log λ_kl`, with λ clamped below at the default floor.
pub fn negloglik(basis: &OrthogonalBasis, covs: &CovarianceSet) -> f64 {
    negloglik_with_floor(basis.as_matrix(), covs, DEFAULT_LAMBDA_FLOOR)
}

pub(crate) fn negloglik_with_floor(basis: &Matrix, covs: &CovarianceSet, floor: f64) -> f64 {
    covs.transformed(basis)
        .iter()
        .zip(covs.iter())
        .map(|(hat, (_, n))| n * hat.diag().iter().map(|&l| l.max(floor).ln()).sum::<f64>())
        .sum()
}

/// For each column of `truth`, the angle (radians) to its best-matching
/// column of `estimate`, ignoring sign. Matching is greedy by alignment, so
/// the result compares bases up to signed permutation.
pub fn column_match_angles(estimate: &Matrix, truth: &Matrix) -> Vec<f64> {
    let d = truth.cols();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(d * d);
    for t in 0..d {
        for e in 0..estimate.cols() {
            let dot: f64 = (0..truth.rows()).map(|i| truth[(i, t)] * estimate[(i, e)]).sum();
            pairs.push((dot.abs(), t, e));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut used_t = vec![false; d];
    let mut used_e = vec![false; estimate.cols()];
    let mut angles = vec![std::f64::consts::FRAC_PI_2; d];
    for (_, t, e) in pairs {
        if used_t[t] || used_e[e] {
            continue;
        }
        used_t[t] = true;
        used_e[e] = true;
        let u = truth.column_values(t);
        let v = estimate.column_values(e);
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let perp: f64 = u
            .iter()
            .zip(&v)
            .map(|(a, b)| (b - dot * a).powi(2))
            .sum::<f64>()
            .sqrt();
        angles[t] = perp.atan2(dot.abs());
    }
    angles
}
