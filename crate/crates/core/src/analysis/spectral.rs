//! Symmetric linear operators and their extreme eigenvalues.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ChannelInstance;

/// Square linear map applied to vectors without exposing its entries.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// Multiplications per call to [`LinearOperator::apply`].
    fn apply_cost(&self) -> usize;
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.nrows();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (col, xj) in self.as_slice().chunks_exact(n).zip(x) {
            for (o, a) in out.iter_mut().zip(col) {
                *o += a * xj;
            }
        }
    }

    fn apply_cost(&self) -> usize {
        self.len()
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        (**self).apply(x, out)
    }

    fn apply_cost(&self) -> usize {
        (**self).apply_cost()
    }
}

/// `scale · W (H Hᵀ − D) W + shift · I` on `N_r`-vectors, where `D` is the
/// exact diagonal of `H Hᵀ` and `W` an optional diagonal weighting.
///
/// Applied through `H` and `Hᵀ`; [`OffDiagonalGram::to_dense`] materializes it.
#[derive(Debug, Clone)]
pub struct OffDiagonalGram<'a> {
    ch: &'a ChannelInstance,
    weights: Option<Vec<f64>>,
    scale: f64,
    shift: f64,
}

impl<'a> OffDiagonalGram<'a> {
    pub fn new(ch: &'a ChannelInstance, scale: f64, shift: f64) -> Self {
        Self { ch, weights: None, scale, shift }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.ch.n_antennas());
        self.weights = Some(weights);
        self
    }

    /// Same operator with `scale' = a·scale`, `shift' = a·shift + b`.
    pub fn affine(mut self, a: f64, b: f64) -> Self {
        self.scale *= a;
        self.shift = a * self.shift + b;
        self
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let h = &self.ch.h;
        let mut g = h * h.transpose();
        let nr = g.nrows();
        for m in 0..nr {
            g[(m, m)] = 0.0;
        }
        if let Some(w) = &self.weights {
            for j in 0..nr {
                for i in 0..nr {
                    g[(i, j)] *= w[i] * w[j];
                }
            }
        }
        g *= self.scale;
        for m in 0..nr {
            g[(m, m)] += self.shift;
        }
        g
    }
}

impl LinearOperator for OffDiagonalGram<'_> {
    fn dim(&self) -> usize {
        self.ch.n_antennas()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let u: Vec<f64> = match &self.weights {
            Some(w) => x.iter().zip(w).map(|(a, b)| a * b).collect(),
            None => x.to_vec(),
        };
        let t = self.ch.apply_transpose(&u);
        let s = self.ch.apply(&t);
        for m in 0..out.len() {
            let mut v = s[m] - self.ch.gram_diag[m] * u[m];
            if let Some(w) = &self.weights {
                v *= w[m];
            }
            out[m] = self.scale * v + self.shift * x[m];
        }
    }

    fn apply_cost(&self) -> usize {
        2 * self.ch.h.len() + 4 * self.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerOptions {
    /// Stop once `‖A x − θ x‖ ≤ tol · |θ|` for the unit iterate `x`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 10_000 }
    }
}

/// Largest operator dimension the dense fallback will materialize.
pub const DENSE_FALLBACK_LIMIT: usize = 2000;

fn start_vector(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
    n
}

/// Eigenvalue of largest magnitude (with sign) of a symmetric operator,
/// optionally shifted: the iteration runs on `A − shift·I`.
fn power_iteration(op: &dyn LinearOperator, shift: f64, opts: &PowerOptions) -> Result<f64> {
    let n = op.dim();
    if n == 0 {
        return Ok(0.0);
    }
    let mut x = start_vector(n);
    let mut y = vec![0.0; n];
    for _ in 0..opts.max_iters {
        op.apply(&x, &mut y);
        if shift != 0.0 {
            y.iter_mut().zip(&x).for_each(|(a, b)| *a -= shift * b);
        }
        let theta: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let res = x.iter().zip(&y).map(|(a, b)| (b - theta * a).powi(2)).sum::<f64>().sqrt();
        if res <= opts.tol * theta.abs() || res == 0.0 {
            return Ok(theta);
        }
        if normalize(&mut y) == 0.0 {
            return Ok(0.0);
        }
        std::mem::swap(&mut x, &mut y);
    }
    Err(Error::NoConvergence { iterations: opts.max_iters })
}

/// `(λ_min, λ_max)` of a symmetric operator: one power pass for the
/// dominant eigenvalue, then a pass on the shifted operator for the other
/// end of the spectrum.
pub fn extreme_eigenvalues(op: &dyn LinearOperator, opts: &PowerOptions) -> Result<(f64, f64)> {
    let dominant = power_iteration(op, 0.0, opts)?;
    let other = dominant + power_iteration(op, dominant, opts)?;
    Ok((dominant.min(other), dominant.max(other)))
}

/// Spectral radius `max |λ|` of a symmetric operator by power iteration.
pub fn spectral_radius(op: &dyn LinearOperator, opts: &PowerOptions) -> Result<f64> {
    let (lo, hi) = extreme_eigenvalues(op, opts)?;
    Ok(lo.abs().max(hi.abs()))
}

/// Materializes `op` column by column.
pub fn materialize(op: &dyn LinearOperator) -> DMatrix<f64> {
    let n = op.dim();
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.apply(&e, &mut col);
        m.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    m
}

/// Dense symmetric eigensolve of the extremes.
pub fn dense_extreme_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let ev = SymmetricEigen::new(sym).eigenvalues;
    ev.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
}

/// [`extreme_eigenvalues`], falling back to a dense eigensolve when power
/// iteration stalls on an operator of dimension up to
/// [`DENSE_FALLBACK_LIMIT`].
pub fn extreme_eigenvalues_or_dense(op: &dyn LinearOperator, opts: &PowerOptions) -> Result<(f64, f64)> {
    match extreme_eigenvalues(op, opts) {
        Err(Error::NoConvergence { .. }) if op.dim() <= DENSE_FALLBACK_LIMIT => {
            Ok(dense_extreme_eigenvalues(&materialize(op)))
        }
        other => other,
    }
}

pub fn spectral_radius_or_dense(op: &dyn LinearOperator, opts: &PowerOptions) -> Result<f64> {
    let (lo, hi) = extreme_eigenvalues_or_dense(op, opts)?;
    Ok(lo.abs().max(hi.abs()))
}
