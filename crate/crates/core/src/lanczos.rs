//! Restarted Lanczos with full reorthogonalization for the largest
//! eigenpair of a symmetric operator.
//!
//! The Krylov basis `V` and its image `AV` are kept explicitly, so Ritz pairs
//! come from the projected matrix `Vᵀ A V` and residuals are exact. On
//! reaching the subspace limit the basis is compressed to the leading Ritz
//! vectors (thick restart).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub(crate) struct LanczosResult {
    pub value: f64,
    pub vector: Vec<f64>,
    pub residual: f64,
    pub matvecs: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LanczosParams {
    /// Absolute residual target `‖Av − θv‖`.
    pub tolerance: f64,
    pub max_matvecs: usize,
    pub subspace: usize,
    pub keep: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Basis<'a> {
    op: &'a dyn Fn(&[f64], &mut [f64]),
    v: Vec<Vec<f64>>,
    av: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    matvecs: usize,
}

impl<'a> Basis<'a> {
    /// Orthogonalizes `w` against the basis (twice) and appends it.
    /// Returns false if `w` lies in the span.
    fn push(&mut self, mut w: Vec<f64>) -> bool {
        let original = norm(&w);
        if original == 0.0 {
            return false;
        }
        for _ in 0..2 {
            for b in &self.v {
                let c = dot(b, &w);
                axpy(-c, b, &mut w);
            }
        }
        let nw = norm(&w);
        if nw <= 1e-10 * original {
            return false;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let mut aw = vec![0.0; w.len()];
        (self.op)(&w, &mut aw);
        self.matvecs += 1;
        let mut column: Vec<f64> = self.v.iter().map(|b| dot(b, &aw)).collect();
        column.push(dot(&w, &aw));
        for (row, &c) in self.h.iter_mut().zip(&column) {
            row.push(c);
        }
        self.h.push(column);
        self.v.push(w);
        self.av.push(aw);
        true
    }

    fn projected(&self) -> DMatrix<f64> {
        let m = self.v.len();
        let mut h = DMatrix::from_fn(m, m, |i, j| self.h[i][j]);
        // symmetrize away roundoff
        h = (&h + h.transpose()) * 0.5;
        h
    }

    /// Linear combination `Σ_k y_k X_k` of stored vectors.
    fn combine(vectors: &[Vec<f64>], y: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; vectors[0].len()];
        for (vk, &yk) in vectors.iter().zip(y.iter()) {
            axpy(yk, vk, &mut out);
        }
        out
    }
}

/// Ritz pairs of the projected matrix, sorted by decreasing value.
fn ritz(h: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(h.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_columns(&order.iter().map(|&k| eig.eigenvectors.column(k)).collect::<Vec<_>>());
    (values, vectors)
}

/// Largest eigenpair of the symmetric operator `op` on `R^dim`.
pub(crate) fn largest_eigenpair(
    op: &dyn Fn(&[f64], &mut [f64]),
    dim: usize,
    start: &[f64],
    params: LanczosParams,
    seed: u64,
) -> LanczosResult {
    let subspace = params.subspace.clamp(2, dim.max(2));
    let keep = params.keep.clamp(1, subspace - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed1a_2c05);
    let random_vector = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(rng)).collect() };

    let mut basis = Basis {
        op,
        v: Vec::with_capacity(subspace),
        av: Vec::with_capacity(subspace),
        h: Vec::with_capacity(subspace),
        matvecs: 0,
    };
    if !basis.push(start.to_vec()) {
        let r = random_vector(&mut rng);
        basis.push(r);
    }

    let mut best;
    loop {
        let (values, vectors) = ritz(&basis.projected());
        let y = vectors.column(0).into_owned();
        let theta = values[0];
        let x = Basis::combine(&basis.v, &y);
        let mut r = Basis::combine(&basis.av, &y);
        axpy(-theta, &x, &mut r);
        let residual = norm(&r);
        best = LanczosResult {
            value: theta,
            vector: x,
            residual,
            matvecs: basis.matvecs,
            converged: residual <= params.tolerance,
        };
        if best.converged || basis.matvecs >= params.max_matvecs {
            break;
        }
        let space_exhausted = basis.v.len() >= dim;
        if space_exhausted {
            // Residual is pure roundoff once the basis spans the space.
            best.converged = true;
            break;
        }
        if basis.v.len() >= subspace {
            let kept: Vec<(Vec<f64>, Vec<f64>)> = (0..keep)
                .map(|k| {
                    let yk = vectors.column(k).into_owned();
                    (Basis::combine(&basis.v, &yk), Basis::combine(&basis.av, &yk))
                })
                .collect();
            basis.v.clear();
            basis.av.clear();
            basis.h.clear();
            for (k, (vk, avk)) in kept.into_iter().enumerate() {
                // Ritz vectors are orthonormal; re-orthogonalize against roundoff drift.
                let mut vk = vk;
                for b in &basis.v {
                    let c = dot(b, &vk);
                    axpy(-c, b, &mut vk);
                }
                let nv = norm(&vk);
                vk.iter_mut().for_each(|x| *x /= nv);
                let avk: Vec<f64> = avk.iter().map(|x| x / nv).collect();
                let mut column: Vec<f64> = basis.v.iter().map(|b| dot(b, &avk)).collect();
                column.push(dot(&vk, &avk));
                debug_assert_eq!(column.len(), k + 1);
                for (row, &c) in basis.h.iter_mut().zip(&column) {
                    row.push(c);
                }
                basis.h.push(column);
                basis.v.push(vk);
                basis.av.push(avk);
            }
        }
        // Expanding with the residual keeps the span a Krylov space.
        if !basis.push(r) {
            let mut pushed = false;
            for _ in 0..4 {
                let fresh = random_vector(&mut rng);
                if basis.push(fresh) {
                    pushed = true;
                    break;
                }
            }
            if !pushed {
                best.converged = true;
                break;
            }
        }
    }
    best.matvecs = basis.matvecs;
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_op(m: &DMatrix<f64>) -> impl Fn(&[f64], &mut [f64]) + '_ {
        move |x: &[f64], y: &mut [f64]| {
            let r = m * DVector::from_column_slice(x);
            y.copy_from_slice(r.as_slice());
        }
    }

    #[test]
    fn matches_dense_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &dim in &[5usize, 30, 120] {
            let a = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
            let s: DMatrix<f64> = (&a + a.transpose()) * 0.5;
            let exact = s.symmetric_eigenvalues().max();
            let op = dense_op(&s);
            let start = vec![1.0; dim];
            let params = LanczosParams {
                tolerance: 1e-10,
                max_matvecs: 5000,
                subspace: 40,
                keep: 10,
            };
            let res = largest_eigenpair(&op, dim, &start, params, 1);
            assert!(res.converged);
            assert!((res.value - exact).abs() < 1e-9, "dim {dim}: {} vs {exact}", res.value);
            assert!((norm(&res.vector) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_operator() {
        let op = |_: &[f64], y: &mut [f64]| y.iter_mut().for_each(|v| *v = 0.0);
        let params = LanczosParams {
            tolerance: 0.0,
            max_matvecs: 10,
            subspace: 5,
            keep: 2,
        };
        let res = largest_eigenpair(&op, 6, &[1.0; 6], params, 0);
        assert_eq!(res.value, 0.0);
        assert!(res.converged);
    }
}
