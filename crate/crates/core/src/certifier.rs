//! Global-optimality certificate: `C = L̄ − BDiag(Λ)` and its minimum eigenpair.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::lanczos::{largest_eigenpair, LanczosParams};
use crate::problem::{BlockSparseSymmetric, ConnectionLaplacian, Factor, StiefelAssignment};

pub const DEFAULT_THRESHOLD: f64 = -1e-4;
/// `‖C u‖ / ‖C‖` below which a row of S is treated as an exact null vector.
const KERNEL_TOL: f64 = 1e-6;

/// Sparse symmetric dn×dn certificate matrix sharing the block pattern of `L̄`.
#[derive(Debug, Clone)]
pub struct CertificateMatrix {
    d: usize,
    matrix: BlockSparseSymmetric,
    /// Orthonormal basis of the row space of S, which `C` annihilates at a
    /// critical point.
    kernel: Vec<Vec<f64>>,
}

impl CertificateMatrix {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &BlockSparseSymmetric {
        &self.matrix
    }

    pub fn multiply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.multiply(x, y);
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.matrix.to_dense()
    }

    /// Orthonormal vectors spanning the row space of the factor.
    pub fn kernel(&self) -> &[Vec<f64>] {
        &self.kernel
    }

    fn rayleigh(&self, v: &[f64]) -> (f64, f64) {
        let mut cv = vec![0.0; v.len()];
        self.multiply(v, &mut cv);
        let q = dot(v, &cv);
        let r = cv.iter().zip(v).map(|(a, b)| (a - q * b).powi(2)).sum::<f64>().sqrt();
        (q, r)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Appends `v` to the orthonormal set `basis` unless it is (numerically) in its span.
fn push_orthonormal(basis: &mut Vec<Vec<f64>>, mut v: Vec<f64>) {
    let original = dot(&v, &v).sqrt();
    if original == 0.0 {
        return;
    }
    for _ in 0..2 {
        for b in basis.iter() {
            let c = dot(b, &v);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    let norm = dot(&v, &v).sqrt();
    if norm > 1e-8 * original {
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
}

/// `C = L̄ − ½ BDiag(L̄ SᵀS + SᵀS L̄)`.
pub fn build_certificate(l: &ConnectionLaplacian, s: &StiefelAssignment) -> Result<CertificateMatrix> {
    let (n, d) = (l.n(), l.d());
    if s.n() != n || s.d() != d {
        return Err(invalid(format!(
            "assignment has {} blocks of width {}, Laplacian has {n} blocks of width {d}",
            s.n(),
            s.d()
        )));
    }
    let m = l.matrix();
    // Λ_i = Σ_j L̄_ij S_jᵀ S_i before symmetrization
    let mut lambda: Vec<DMatrix<f64>> = m
        .diagonal_blocks()
        .iter()
        .enumerate()
        .map(|(i, lii)| {
            let si = s.block(i);
            lii * (si.transpose() * si)
        })
        .collect();
    for (i, j, lij) in m.off_diagonal_blocks() {
        let (si, sj) = (s.block(*i), s.block(*j));
        lambda[*i] += lij * (sj.transpose() * si);
        lambda[*j] += lij.transpose() * (si.transpose() * sj);
    }
    let diagonal = m
        .diagonal_blocks()
        .iter()
        .zip(&lambda)
        .map(|(lii, li)| lii - (li + li.transpose()) * 0.5)
        .collect();
    let matrix = BlockSparseSymmetric::new(n, d, diagonal, m.off_diagonal_blocks().to_vec())?;
    let mut kernel = Vec::with_capacity(s.p());
    for r in 0..s.p() {
        let row = (0..n)
            .flat_map(|i| s.block(i).row(r).iter().copied().collect::<Vec<_>>())
            .collect();
        push_orthonormal(&mut kernel, row);
    }
    Ok(CertificateMatrix { d, matrix, kernel })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenConfig {
    /// Residual target relative to the spectral-norm estimate of `C`.
    pub tolerance: f64,
    /// Matrix-vector product budget per phase.
    pub max_iterations: usize,
    pub subspace: usize,
    pub seed: u64,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 20_000,
            subspace: 60,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: DVector<f64>,
    /// `‖Cv − λv‖`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Spectral-norm estimate of `C` used for the tolerance.
    pub norm_estimate: f64,
}

/// Minimum eigenpair of `C`.
///
/// A loose Lanczos run for the top of the spectrum gives a shift `σ`; the top
/// of `σI − C` then gives `σ − λ_min`. Rows of S that `C` annihilates are
/// shifted out of the way, since a Ritz value locking onto that cluster can
/// pass the residual test while a slightly negative eigenvalue goes unseen.
/// A second run from an independent start, deflated against the first
/// answer, guards against the same failure elsewhere in the spectrum. The
/// result is the Rayleigh-Ritz pair of `C` itself on the span of both answers
/// and the kernel.
pub fn min_eigenpair(c: &CertificateMatrix, cfg: &EigenConfig, warm_start: Option<&[f64]>) -> Result<Eigenpair> {
    if !(cfg.tolerance > 0.0) || cfg.max_iterations == 0 {
        return Err(invalid("eigen tolerance and budget must be positive"));
    }
    let dim = c.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gaussian = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let random = gaussian();
    let confirm_start = gaussian();
    let apply = |x: &[f64], y: &mut [f64]| c.multiply(x, y);

    // Phase 1: loose estimate of λ_max, an upper bound on the spectrum.
    let top = largest_eigenpair(
        &apply,
        dim,
        &random,
        LanczosParams {
            tolerance: 1e-3 * frobenius_bound(c).max(f64::MIN_POSITIVE),
            max_matvecs: cfg.max_iterations,
            subspace: cfg.subspace.min(30),
            keep: 5,
        },
        cfg.seed,
    );
    let sigma = top.value + top.residual;
    let norm_guess = top.value.abs().max(f64::MIN_POSITIVE);
    let params = LanczosParams {
        tolerance: cfg.tolerance * norm_guess,
        max_matvecs: cfg.max_iterations,
        subspace: cfg.subspace,
        keep: (cfg.subspace / 4).max(2),
    };
    let bottom_run = |deflate: &[Vec<f64>], start: &[f64], seed: u64| {
        let shifted = |x: &[f64], y: &mut [f64]| {
            c.multiply(x, y);
            for (yv, xv) in y.iter_mut().zip(x) {
                *yv = sigma * xv - *yv;
            }
            for u in deflate {
                let coef = sigma * dot(u, x);
                y.iter_mut().zip(u).for_each(|(yv, uv)| *yv -= coef * uv);
            }
        };
        largest_eigenpair(&shifted, dim, start, params, seed)
    };

    let start = match warm_start {
        Some(w) if w.len() == dim && w.iter().any(|x| *x != 0.0) => {
            let wn = dot(w, w).sqrt();
            let rn = dot(&random, &random).sqrt();
            w.iter().zip(&random).map(|(a, b)| a / wn + 1e-2 * b / rn).collect()
        }
        _ => random.clone(),
    };
    // Only rows that C actually annihilates are safe to shift away.
    let kernel: Vec<Vec<f64>> = c
        .kernel()
        .iter()
        .filter(|u| {
            let mut y = vec![0.0; dim];
            c.multiply(u, &mut y);
            dot(&y, &y).sqrt() <= KERNEL_TOL * norm_guess
        })
        .cloned()
        .collect();
    let first = bottom_run(&kernel, &start, cfg.seed.wrapping_add(1));
    let mut deflate = kernel.clone();
    push_orthonormal(&mut deflate, first.vector.clone());
    let second = bottom_run(&deflate, &confirm_start, cfg.seed.wrapping_add(2));
    let matvecs = top.matvecs + first.matvecs + second.matvecs;

    // Rayleigh-Ritz on span{first, second, kernel}.
    let mut span = Vec::new();
    push_orthonormal(&mut span, first.vector);
    push_orthonormal(&mut span, second.vector);
    for u in &kernel {
        push_orthonormal(&mut span, u.clone());
    }
    let images: Vec<Vec<f64>> = span
        .iter()
        .map(|u| {
            let mut y = vec![0.0; dim];
            c.multiply(u, &mut y);
            y
        })
        .collect();
    let h = DMatrix::from_fn(span.len(), span.len(), |a, b| {
        0.5 * (dot(&span[a], &images[b]) + dot(&span[b], &images[a]))
    });
    let eig = h.symmetric_eigen();
    let imin = eig.eigenvalues.imin();
    let mut vector = vec![0.0; dim];
    for (u, &y) in span.iter().zip(eig.eigenvectors.column(imin).iter()) {
        vector.iter_mut().zip(u).for_each(|(x, uv)| *x += y * uv);
    }
    let norm = dot(&vector, &vector).sqrt();
    vector.iter_mut().for_each(|x| *x /= norm);
    let (value, residual) = c.rayleigh(&vector);
    let lanczos_converged = first.converged && second.converged;
    let norm_estimate = top.value.abs().max(value.abs());
    Ok(Eigenpair {
        value,
        vector: DVector::from_vec(vector),
        residual,
        iterations: matvecs,
        converged: lanczos_converged || residual <= cfg.tolerance * norm_estimate,
        norm_estimate,
    })
}

fn frobenius_bound(c: &CertificateMatrix) -> f64 {
    let m = c.matrix();
    let diag: f64 = m.diagonal_blocks().iter().map(|b| b.norm_squared()).sum();
    let off: f64 = m
        .off_diagonal_blocks()
        .iter()
        .map(|(_, _, b)| 2.0 * b.norm_squared())
        .sum();
    (diag + off).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictKind {
    Certified,
    NotCertified,
    /// The eigensolver did not converge; no claim either way.
    Indeterminate,
}

#[derive(Debug, Clone)]
pub struct CertificateVerdict {
    pub kind: VerdictKind,
    pub lambda_min: f64,
    pub threshold: f64,
    pub eigenpair: Eigenpair,
}

impl CertificateVerdict {
    pub fn certified(&self) -> bool {
        self.kind == VerdictKind::Certified
    }
}

pub fn certify(eig: Eigenpair, threshold: f64) -> CertificateVerdict {
    let kind = if !eig.converged {
        VerdictKind::Indeterminate
    } else if eig.value >= threshold {
        VerdictKind::Certified
    } else {
        VerdictKind::NotCertified
    };
    CertificateVerdict {
        kind,
        lambda_min: eig.value,
        threshold,
        eigenpair: eig,
    }
}
