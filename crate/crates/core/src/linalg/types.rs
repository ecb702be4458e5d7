use std::ops::Deref;

use super::{det, Matrix};
use crate::error::{shape_err, Error, Result};

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = 1e-10;
pub const SKEW_TOL: f64 = 1e-12;
pub const ORTHO_TOL: f64 = 1e-10;
pub const DET_TOL: f64 = 1e-8;

macro_rules! matrix_newtype {
    ($name:ident) => {
        impl Deref for $name {
            type Target = Matrix;
            fn deref(&self) -> &Matrix {
                &self.0
            }
        }

        impl AsRef<Matrix> for $name {
            fn as_ref(&self) -> &Matrix {
                &self.0
            }
        }

        impl From<$name> for Matrix {
            fn from(v: $name) -> Matrix {
                v.0
            }
        }

        impl $name {
            pub fn dim(&self) -> usize {
                self.0.rows()
            }

            pub fn as_matrix(&self) -> &Matrix {
                &self.0
            }

            pub fn into_matrix(self) -> Matrix {
                self.0
            }
        }
    };
}

fn require_square(m: &Matrix, what: &'static str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(shape_err(what, format!("non-square {}x{}", m.rows(), m.cols())))
    }
}

/// Symmetric positive-semidefinite matrix (up to roundoff).
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceMatrix(Matrix);
matrix_newtype!(CovarianceMatrix);

impl CovarianceMatrix {
    /// Validates symmetry to 1e-12 and eigenvalues ≥ −1e-10.
    pub fn new(m: Matrix) -> Result<Self> {
        require_square(&m, "covariance")?;
        if !m.is_finite() {
            return Err(Error::InvalidValue("covariance has non-finite entries".into()));
        }
        let asym = m.max_abs_diff(&m.transpose());
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidValue(format!(
                "covariance not symmetric (max |S - Sᵀ| = {asym:e})"
            )));
        }
        let min_eig = min_eigenvalue(&m);
        if min_eig < -PSD_TOL {
            return Err(Error::InvalidValue(format!(
                "covariance not positive semidefinite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(CovarianceMatrix(m))
    }

    /// Skips the eigenvalue check; the caller guarantees a Gram-type
    /// construction. Symmetry is still enforced.
    pub(crate) fn from_gram(m: Matrix) -> Self {
        CovarianceMatrix(m.symmetrize())
    }
}

pub(crate) fn min_eigenvalue(m: &Matrix) -> f64 {
    let n = m.rows();
    let sym = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    sym.symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// One domain's covariance and its sample weight `n_k` (usually `N_k − 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedCovariance {
    pub cov: CovarianceMatrix,
    pub weight: f64,
}

/// The `K` per-domain covariances fed to the CPCA solvers.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceSet {
    domains: Vec<WeightedCovariance>,
}

impl CovarianceSet {
    pub fn new(domains: Vec<WeightedCovariance>) -> Result<Self> {
        let Some(first) = domains.first() else {
            return Err(Error::InvalidValue("covariance set needs at least one domain".into()));
        };
        let d = first.cov.dim();
        for (k, dom) in domains.iter().enumerate() {
            if dom.cov.dim() != d {
                return Err(shape_err(
                    "covariance set",
                    format!("domain {k} has dim {}, expected {d}", dom.cov.dim()),
                ));
            }
            if !(dom.weight > 0.0 && dom.weight.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "domain {k} weight must be positive, got {}",
                    dom.weight
                )));
            }
        }
        Ok(CovarianceSet { domains })
    }

    /// Convenience constructor from raw `(S_k, n_k)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Matrix, f64)>) -> Result<Self> {
        let domains = pairs
            .into_iter()
            .map(|(s, n)| {
                Ok(WeightedCovariance {
                    cov: CovarianceMatrix::new(s)?,
                    weight: n,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(domains)
    }

    pub fn dim(&self) -> usize {
        self.domains[0].cov.dim()
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domains(&self) -> &[WeightedCovariance] {
        &self.domains
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Matrix, f64)> {
        self.domains.iter().map(|d| (d.cov.as_matrix(), d.weight))
    }

    pub fn total_weight(&self) -> f64 {
        self.domains.iter().map(|d| d.weight).sum()
    }

    /// Returns `βᵀ S_k β` for every domain.
    pub fn transformed(&self, basis: &Matrix) -> Vec<Matrix> {
        self.iter()
            .map(|(s, _)| basis.tr_matmul(&s.matmul(basis)))
            .collect()
    }
}

/// Real skew-symmetric matrix, an element of 𝔰𝔬(d).
#[derive(Clone, Debug, PartialEq)]
pub struct SkewMatrix(Matrix);
matrix_newtype!(SkewMatrix);

impl SkewMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        require_square(&m, "skew")?;
        let resid = m.add(&m.transpose()).max_abs();
        if resid > SKEW_TOL {
            return Err(Error::InvalidValue(format!(
                "matrix not skew-symmetric (max |M + Mᵀ| = {resid:e})"
            )));
        }
        Ok(SkewMatrix(m))
    }

    pub fn zeros(d: usize) -> Self {
        SkewMatrix(Matrix::zeros(d, d))
    }

    /// `(M − Mᵀ)/2`.
    pub fn skew_part(m: &Matrix) -> Self {
        assert!(m.is_square());
        let n = m.rows();
        SkewMatrix(Matrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] - m[(j, i)])))
    }

    pub fn scale(&self, c: f64) -> Self {
        SkewMatrix(self.0.scale(c))
    }

    pub fn add(&self, other: &SkewMatrix) -> Self {
        SkewMatrix(self.0.add(&other.0))
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }
}

/// Rotation matrix: `βᵀβ = I` and `det β = +1`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalBasis(Matrix);
matrix_newtype!(OrthogonalBasis);

impl OrthogonalBasis {
    pub fn new(m: Matrix) -> Result<Self> {
        require_square(&m, "orthogonal basis")?;
        let err = orthogonality_error(&m);
        if !(err <= ORTHO_TOL) {
            return Err(Error::InvalidValue(format!(
                "basis not orthogonal (‖βᵀβ − I‖_F = {err:e})"
            )));
        }
        let det = det(&m)?;
        if (det - 1.0).abs() > DET_TOL {
            return Err(Error::InvalidValue(format!("basis determinant {det}, expected +1")));
        }
        Ok(OrthogonalBasis(m))
    }

    pub fn identity(d: usize) -> Self {
        OrthogonalBasis(Matrix::identity(d))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix) -> Self {
        OrthogonalBasis(m)
    }

    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.0)
    }

    pub fn det(&self) -> f64 {
        det(&self.0).unwrap_or(0.0)
    }

    pub fn transpose(&self) -> OrthogonalBasis {
        OrthogonalBasis(self.0.transpose())
    }
}

/// `‖MᵀM − I‖_F`.
pub fn orthogonality_error(m: &Matrix) -> f64 {
    m.tr_matmul(m).sub(&Matrix::identity(m.cols())).frobenius_norm()
}
