//! Dense linear algebra shared by the solvers: the [`Matrix`] carrier,
//! covariance estimation, the Cayley retraction, and off-diagonal energy.
//!
//! All routines are pure and sum in ascending index order, so repeated
//! calls on the same inputs are bitwise reproducible.

mod lu;
mod matrix;
mod types;

pub mod io;

pub use lu::{det, solve, Lu};
pub use matrix::Matrix;
pub use types::{
    orthogonality_error, CovarianceMatrix, CovarianceSet, OrthogonalBasis, SkewMatrix,
    WeightedCovariance, DET_TOL, ORTHO_TOL, PSD_TOL, SKEW_TOL, SYMMETRY_TOL,
};

use crate::error::{Error, Result};

/// Unbiased sample covariance of the rows of `samples` (N×d).
///
/// Two-pass: the column means first, then the centred outer products,
/// symmetrised at the end. Rows are accumulated in lexicographic order of
/// their values, so any permutation of the input rows gives a bitwise
/// identical result.
pub fn covariance(samples: &Matrix) -> Result<CovarianceMatrix> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    if !samples.is_finite() {
        return Err(Error::InvalidValue("samples contain non-finite entries".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        samples
            .row(a)
            .iter()
            .zip(samples.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // Shift by the first row so identical rows centre to exact zeros.
    let shift = samples.row(order[0]).to_vec();
    let mut mean = vec![0.0; d];
    for &i in &order {
        for ((m, v), s) in mean.iter_mut().zip(samples.row(i)).zip(&shift) {
            *m += v - s;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut acc = Matrix::zeros(d, d);
    let mut centred = vec![0.0; d];
    for &i in &order {
        for (((c, v), m), s) in centred.iter_mut().zip(samples.row(i)).zip(&mean).zip(&shift) {
            *c = (v - s) - m;
        }
        for a in 0..d {
            let ca = centred[a];
            for b in a..d {
                acc[(a, b)] += ca * centred[b];
            }
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    let out = Matrix::from_fn(d, d, |a, b| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        acc[(lo, hi)] * scale
    });
    Ok(CovarianceMatrix::from_gram(out))
}

/// Cayley retraction `(I − A/2)(I + A/2)⁻¹`.
///
/// The two factors commute, so the product is obtained as the solution of
/// `(I + A/2)·β = (I − A/2)`; no inverse is formed.
pub fn cayley(a: &SkewMatrix) -> OrthogonalBasis {
    let (plus, minus) = cayley_factors(a.as_matrix());
    // I + A/2 has eigenvalues 1 + iθ/2 for real skew A, so it is never singular.
    let beta = solve(&plus, &minus).expect("I + A/2 is nonsingular for skew A");
    OrthogonalBasis::from_matrix_unchecked(beta)
}

/// `(I + A/2, I − A/2)`.
pub(crate) fn cayley_factors(a: &Matrix) -> (Matrix, Matrix) {
    let d = a.rows();
    let plus = Matrix::from_fn(d, d, |i, j| f64::from(u8::from(i == j)) + 0.5 * a[(i, j)]);
    let minus = Matrix::from_fn(d, d, |i, j| f64::from(u8::from(i == j)) - 0.5 * a[(i, j)]);
    (plus, minus)
}

/// Normalised off-diagonal energy `(‖M‖_F² − ‖diag M‖²)/(d(d−1))`.
pub fn offdiag_energy(m: &Matrix) -> Result<f64> {
    let d = m.rows();
    if d < 2 {
        return Err(Error::DimensionTooSmall { dim: d, min: 2 });
    }
    if !m.is_square() {
        return Err(crate::error::shape_err(
            "offdiag_energy",
            format!("non-square {}x{}", m.rows(), m.cols()),
        ));
    }
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                total += m[(i, j)] * m[(i, j)];
            }
        }
    }
    Ok(total / (d * (d - 1)) as f64)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.frobenius_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_skew(d: usize, rng: &mut impl Rng, scale: f64) -> SkewMatrix {
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            for j in i + 1..d {
                let v: f64 = rng.sample::<f64, _>(StandardNormal) * scale;
                m[(i, j)] = v;
                m[(j, i)] = -v;
            }
        }
        SkewMatrix::new(m).unwrap()
    }

    #[test]
    fn covariance_two_points() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let s = covariance(&x).unwrap();
        assert_eq!(*s.as_matrix(), Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap());
    }

    #[test]
    fn covariance_of_repeated_rows_is_zero() {
        let x = Matrix::from_fn(7, 3, |_, j| j as f64 * 1.5 - 0.3);
        assert_eq!(covariance(&x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn covariance_rejects_single_sample() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(covariance(&x), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn covariance_gaussian_matches_direct_sum_and_population() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 50;
        let x = Matrix::from_fn(n, 2, |_, j| {
            let z: f64 = rng.sample(StandardNormal);
            z * if j == 0 { 3f64.sqrt() } else { 1.0 }
        });
        let s = covariance(&x).unwrap();
        // direct single-formula oracle
        let mean: Vec<f64> = (0..2).map(|j| x.column_values(j).iter().sum::<f64>() / n as f64).collect();
        for a in 0..2 {
            for b in 0..2 {
                let direct: f64 = (0..n)
                    .map(|i| (x[(i, a)] - mean[a]) * (x[(i, b)] - mean[b]))
                    .sum::<f64>()
                    / (n as f64 - 1.0);
                assert!((direct - s[(a, b)]).abs() < 1e-12);
            }
        }
        // Var of a sample variance is 2σ⁴/(n−1); of a covariance σ_aσ_b·sqrt(1/(n−1)).
        let sigma = [3.0, 1.0];
        for a in 0..2 {
            for b in 0..2 {
                let truth = if a == b { sigma[a] } else { 0.0 };
                let stderr = if a == b {
                    (2.0 * sigma[a] * sigma[a] / (n as f64 - 1.0)).sqrt()
                } else {
                    (sigma[0] * sigma[1] / (n as f64 - 1.0)).sqrt()
                };
                assert!((s[(a, b)] - truth).abs() < 5.0 * stderr, "entry ({a},{b})");
            }
        }
    }

    #[test]
    fn cayley_of_zero_is_identity() {
        assert_eq!(*cayley(&SkewMatrix::zeros(5)).as_matrix(), Matrix::identity(5));
    }

    #[test]
    fn cayley_two_by_two_closed_form() {
        for &a in &[-3.0, -0.4, 0.1, 1.0, 7.5] {
            let skew = SkewMatrix::new(Matrix::from_rows(&[vec![0.0, a], vec![-a, 0.0]]).unwrap()).unwrap();
            let beta = cayley(&skew);
            // Counter-clockwise rotation [[c, −s], [s, c]] with tan(θ/2) = a/2;
            // equivalently a clockwise angle with tan(θ/2) = −a/2.
            let theta = 2.0 * (a / 2.0).atan();
            let expected = Matrix::from_rows(&[
                vec![theta.cos(), -theta.sin()],
                vec![theta.sin(), theta.cos()],
            ])
            .unwrap();
            assert!(beta.max_abs_diff(&expected) < 1e-14, "a = {a}");
            assert!(beta.orthogonality_error() < 1e-12);
        }
    }

    #[test]
    fn cayley_random_outputs_are_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &d in &[4, 16, 64] {
            for _ in 0..100 {
                let a = random_skew(d, &mut rng, 1.0);
                let beta = cayley(&a);
                assert!(beta.orthogonality_error() < 1e-10);
                assert!((beta.det() - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn offdiag_energy_examples() {
        assert_eq!(offdiag_energy(&Matrix::diag_from(&[1.0, -2.0, 5.0])).unwrap(), 0.0);
        let m = Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(offdiag_energy(&m).unwrap(), 9.0);
        let a = Matrix::from_fn(4, 4, |i, j| (i as f64) - 2.0 * j as f64 + 0.5);
        assert_eq!(offdiag_energy(&a).unwrap(), offdiag_energy(&a.transpose()).unwrap());
        assert!(matches!(
            offdiag_energy(&Matrix::scalar(2.0)),
            Err(Error::DimensionTooSmall { dim: 1, min: 2 })
        ));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 2)), 0.0);
        assert_eq!(frobenius_norm(&Matrix::identity(9)), 3.0);
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(frobenius_norm(&m), 5.0);
    }

    #[test]
    fn eigenbasis_kills_offdiag_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::from_fn(30, 5, |_, _| rng.sample(StandardNormal));
        let s = covariance(&x).unwrap();
        let eig = nalgebra::DMatrix::from_fn(5, 5, |i, j| s[(i, j)]).symmetric_eigen();
        let v = Matrix::from_fn(5, 5, |i, j| eig.eigenvectors[(i, j)]);
        let rotated = v.tr_matmul(&s.matmul(&v));
        assert!(offdiag_energy(&rotated).unwrap() < 1e-10);
    }

    proptest! {
        #[test]
        fn cayley_negation_is_transpose(seed in any::<u64>(), d in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_skew(d, &mut rng, 2.0);
            let forward = cayley(&a);
            let backward = cayley(&a.neg());
            prop_assert!(backward.max_abs_diff(&forward.as_matrix().transpose()) < 1e-10);
        }

        #[test]
        fn covariance_is_row_order_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::from_fn(12, 4, |_, _| rng.sample(StandardNormal));
            let mut idx: Vec<usize> = (0..12).collect();
            idx.reverse();
            idx.swap(2, 7);
            let a = covariance(&x).unwrap();
            let b = covariance(&x.select_rows(&idx)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
