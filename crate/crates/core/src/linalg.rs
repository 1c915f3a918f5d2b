//! Dense symmetric positive-definite solves with multiplication counting.
//!
//! Matrices are `nalgebra::DMatrix<f64>` (column-major); only the lower
//! triangle of the factor is touched.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::ops::MulCounter;

/// Lower-triangular Cholesky factor `L` with `M = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric matrix, reading only its lower triangle.
    pub fn factor(mut m: DMatrix<f64>, muls: &mut MulCounter) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "cholesky: matrix must be square",
                expected: n,
                actual: m.ncols(),
            });
        }
        for j in 0..n {
            let mut d = m[(j, j)];
            for p in 0..j {
                d -= m[(j, p)] * m[(j, p)];
            }
            muls.add(j);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            m[(j, j)] = djj;
            // Column j below the diagonal; column-major so the inner loop over
            // rows is contiguous.
            for p in 0..j {
                let ljp = m[(j, p)];
                if ljp != 0.0 {
                    for i in (j + 1)..n {
                        let v = m[(i, p)];
                        m[(i, j)] -= v * ljp;
                    }
                }
                muls.add(n - j - 1);
            }
            let inv = 1.0 / djj;
            for i in (j + 1)..n {
                m[(i, j)] *= inv;
            }
            muls.add(n - j);
        }
        Ok(Self { l: m })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `M x = b` by forward and back substitution.
    pub fn solve(&self, b: &[f64], muls: &mut MulCounter) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n, "rhs length");
        let l = &self.l;
        let mut x = b.to_vec();
        // L z = b
        for j in 0..n {
            x[j] /= l[(j, j)];
            let xj = x[j];
            for i in (j + 1)..n {
                x[i] -= l[(i, j)] * xj;
            }
        }
        // Lᵀ x = z
        for j in (0..n).rev() {
            let mut s = x[j];
            for i in (j + 1)..n {
                s -= l[(i, j)] * x[i];
            }
            x[j] = s / l[(j, j)];
        }
        muls.add(n * (n + 1));
        x
    }

    /// Diagonal of `M⁻¹`, via the columns of `L⁻¹`.
    pub fn inverse_diagonal(&self, muls: &mut MulCounter) -> Vec<f64> {
        let n = self.dim();
        let l = &self.l;
        let mut diag = vec![0.0; n];
        let mut col = vec![0.0; n];
        // Column c of L⁻¹ is zero above row c.
        for c in 0..n {
            col[c..].iter_mut().for_each(|v| *v = 0.0);
            col[c] = 1.0 / l[(c, c)];
            for j in (c + 1)..n {
                let mut s = 0.0;
                for p in c..j {
                    s -= l[(j, p)] * col[p];
                }
                col[j] = s / l[(j, j)];
                muls.add(j - c + 1);
            }
            // (M⁻¹)_cc = Σ_j (L⁻¹)_jc².
            for j in c..n {
                diag[c] += col[j] * col[j];
            }
            muls.add(n - c);
        }
        diag
    }
}

/// Solves the SPD system `M x = b` (lower triangle of `M` is read).
pub fn spd_solve(m: DMatrix<f64>, b: &[f64], muls: &mut MulCounter) -> Result<Vec<f64>> {
    Ok(Cholesky::factor(m, muls)?.solve(b, muls))
}
