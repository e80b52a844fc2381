//! Block-Jacobi preconditioned conjugate gradient.

use nalgebra::DMatrix;

use crate::error::{Result, ShonanError};

/// Symmetric positive (semi)definite operator `y = A x`.
pub(crate) trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// Inverses of the diagonal blocks, stored contiguously.
#[derive(Debug, Clone)]
pub(crate) struct BlockJacobi {
    block: usize,
    inverses: Vec<f64>,
}

impl BlockJacobi {
    /// Fails with `NumericalFailure` if any block is not positive definite.
    pub(crate) fn new(blocks: &[DMatrix<f64>]) -> Result<Self> {
        let block = blocks.first().map_or(0, |b| b.nrows());
        let mut inverses = Vec::with_capacity(blocks.len() * block * block);
        for (i, b) in blocks.iter().enumerate() {
            let chol = b.clone().cholesky().ok_or_else(|| {
                ShonanError::NumericalFailure(format!("preconditioner block {i} is not positive definite"))
            })?;
            inverses.extend_from_slice(chol.inverse().as_slice());
        }
        Ok(Self { block, inverses })
    }

    pub(crate) fn apply(&self, r: &[f64], z: &mut [f64]) {
        let b = self.block;
        for ((inv, r), z) in self
            .inverses
            .chunks_exact(b * b)
            .zip(r.chunks_exact(b))
            .zip(z.chunks_exact_mut(b))
        {
            z.iter_mut().for_each(|v| *v = 0.0);
            for (col, &rc) in r.iter().enumerate() {
                for (zr, m) in z.iter_mut().zip(&inv[col * b..(col + 1) * b]) {
                    *zr += m * rc;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PcgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` from `x = 0`. On hitting `max_iter` the iterate with the
/// smallest residual seen is returned with `converged = false`.
pub(crate) fn pcg(
    a: &impl LinearOperator,
    precond: &BlockJacobi,
    b: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> PcgOutcome {
    let n = a.dim();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return PcgOutcome {
            x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond.apply(&r, &mut z);
    let mut dir = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut best = (1.0, x.clone());

    for it in 1..=max_iter {
        a.apply(&dir, &mut ap);
        let curvature = dot(&dir, &ap);
        if !(curvature > 0.0) {
            break;
        }
        let alpha = rz / curvature;
        for k in 0..n {
            x[k] += alpha * dir[k];
            r[k] -= alpha * ap[k];
        }
        let rel = dot(&r, &r).sqrt() / b_norm;
        if rel < best.0 {
            best = (rel, x.clone());
        }
        if rel <= rel_tol {
            return PcgOutcome {
                x,
                iterations: it,
                relative_residual: rel,
                converged: true,
            };
        }
        precond.apply(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            dir[k] = z[k] + beta * dir[k];
        }
    }
    PcgOutcome {
        x: best.1,
        iterations: max_iter,
        relative_residual: best.0,
        converged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    struct Dense(DMatrix<f64>);

    impl LinearOperator for Dense {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn apply(&self, x: &[f64], y: &mut [f64]) {
            let r = &self.0 * DVector::from_column_slice(x);
            y.copy_from_slice(r.as_slice());
        }
    }

    #[test]
    fn solves_spd_system() {
        let n = 12;
        let m = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        let a = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
        let blocks: Vec<_> = (0..4).map(|i| a.view((3 * i, 3 * i), (3, 3)).into_owned()).collect();
        let pre = BlockJacobi::new(&blocks).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let out = pcg(&Dense(a.clone()), &pre, &b, 1e-12, 200);
        assert!(out.converged);
        let exact = a.cholesky().unwrap().solve(&DVector::from_column_slice(&b));
        let err = (DVector::from_column_slice(&out.x) - &exact).norm() / exact.norm();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let pre = BlockJacobi::new(&[DMatrix::identity(2, 2)]).unwrap();
        let out = pcg(&Dense(DMatrix::identity(2, 2)), &pre, &[0.0, 0.0], 1e-8, 10);
        assert_eq!(out.x, vec![0.0, 0.0]);
        assert!(out.converged);
    }

    #[test]
    fn indefinite_block_is_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            BlockJacobi::new(&[bad]),
            Err(ShonanError::NumericalFailure(_))
        ));
    }
}
