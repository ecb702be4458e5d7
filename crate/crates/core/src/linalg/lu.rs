use super::Matrix;
use crate::error::{shape_err, Error, Result};

/// Partial-pivot LU factorisation `P·M = L·U` of a square matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    // L (unit diagonal, strictly lower part) and U packed together.
    lu: Matrix,
    perm: Vec<usize>,
    swaps: usize,
}

impl Lu {
    pub fn factor(m: &Matrix) -> Result<Lu> {
        if !m.is_square() {
            return Err(shape_err(
                "lu",
                format!("non-square {}x{}", m.rows(), m.cols()),
            ));
        }
        let n = m.rows();
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for col in 0..n {
            let (pivot_row, pivot_abs) = (col..n)
                .map(|r| (r, lu[(r, col)].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_abs == 0.0 || !pivot_abs.is_finite() {
                return Err(Error::Singular {
                    col,
                    pivot: pivot_abs,
                });
            }
            if pivot_row != col {
                for j in 0..n {
                    let tmp = lu[(col, j)];
                    lu[(col, j)] = lu[(pivot_row, j)];
                    lu[(pivot_row, j)] = tmp;
                }
                perm.swap(col, pivot_row);
                swaps += 1;
            }
            let pivot = lu[(col, col)];
            for r in col + 1..n {
                let factor = lu[(r, col)] / pivot;
                lu[(r, col)] = factor;
                if factor != 0.0 {
                    for j in col + 1..n {
                        let u = lu[(col, j)];
                        lu[(r, j)] -= factor * u;
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm, swaps })
    }

    pub fn det(&self) -> f64 {
        let sign = if self.swaps % 2 == 0 { 1.0 } else { -1.0 };
        (0..self.n).fold(sign, |acc, i| acc * self.lu[(i, i)])
    }

    /// Solves `M·X = B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.n, "lu solve rhs rows");
        let n = self.n;
        let mut x = b.select_rows(&self.perm);
        let cols = x.cols();
        // forward substitution with unit L
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[(i, k)];
                if l != 0.0 {
                    for j in 0..cols {
                        let v = x[(k, j)];
                        x[(i, j)] -= l * v;
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.lu[(i, k)];
                if u != 0.0 {
                    for j in 0..cols {
                        let v = x[(k, j)];
                        x[(i, j)] -= u * v;
                    }
                }
            }
            let d = self.lu[(i, i)];
            for j in 0..cols {
                x[(i, j)] /= d;
            }
        }
        x
    }

    /// Solves `Mᵀ·X = B` with the same factorisation.
    pub fn solve_transpose(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.n, "lu solve_transpose rhs rows");
        let n = self.n;
        let cols = b.cols();
        // Mᵀ = Uᵀ Lᵀ P, so solve Uᵀ y = b, Lᵀ z = y, x = Pᵀ z.
        let mut y = b.clone();
        for i in 0..n {
            for k in 0..i {
                let u = self.lu[(k, i)];
                if u != 0.0 {
                    for j in 0..cols {
                        let v = y[(k, j)];
                        y[(i, j)] -= u * v;
                    }
                }
            }
            let d = self.lu[(i, i)];
            for j in 0..cols {
                y[(i, j)] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let l = self.lu[(k, i)];
                if l != 0.0 {
                    for j in 0..cols {
                        let v = y[(k, j)];
                        y[(i, j)] -= l * v;
                    }
                }
            }
        }
        let mut x = Matrix::zeros(n, cols);
        for (i, &p) in self.perm.iter().enumerate() {
            for j in 0..cols {
                x[(p, j)] = y[(i, j)];
            }
        }
        x
    }
}

/// Solves `M·X = B` by partial-pivot LU.
pub fn solve(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows() != m.rows() {
        return Err(shape_err(
            "solve",
            format!("lhs {}x{} rhs {}x{}", m.rows(), m.cols(), b.rows(), b.cols()),
        ));
    }
    Ok(Lu::factor(m)?.solve(b))
}

pub fn det(m: &Matrix) -> Result<f64> {
    match Lu::factor(m) {
        Ok(lu) => Ok(lu.det()),
        Err(Error::Singular { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Matrix {
        Matrix::from_rows(&[
            vec![0.0, 2.0, 1.0],
            vec![1.0, -1.0, 3.0],
            vec![4.0, 0.5, -2.0],
        ])
        .unwrap()
    }

    #[test]
    fn solve_and_transpose_solve() {
        let m = sample();
        let b = Matrix::from_fn(3, 2, |i, j| (i + j) as f64 + 0.25);
        let lu = Lu::factor(&m).unwrap();
        let x = lu.solve(&b);
        assert!(m.matmul(&x).max_abs_diff(&b) < 1e-13);
        let xt = lu.solve_transpose(&b);
        assert!(m.transpose().matmul(&xt).max_abs_diff(&b) < 1e-13);
    }

    #[test]
    fn determinant_matches_cofactor_expansion() {
        let m = sample();
        let cofactor = 0.0 * (2.0 - 1.5) - 2.0 * (-2.0 - 12.0) + 1.0 * (0.5 + 4.0);
        assert!((det(&m).unwrap() - cofactor).abs() < 1e-12);
    }

    #[test]
    fn singular_detected() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(Lu::factor(&m), Err(Error::Singular { .. })));
        assert_eq!(det(&m).unwrap(), 0.0);
    }
}
