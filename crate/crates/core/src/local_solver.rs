//! Levenberg-Marquardt on SO(p)^n with block-sparse normal equations solved
//! by preconditioned conjugate gradient.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result, ShonanError};
use crate::manifold::{self, generator_pairs, tangent_dim, Rotation};
use crate::pcg::{self, BlockJacobi, LinearOperator};
use crate::problem::{edge_cost_lifted, BlockSparseSymmetric, LiftedAssignment, MeasurementGraph};

/// How the global-symmetry null space of the lifted problem is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GaugeMode {
    /// Rely on the LM damping term alone.
    #[default]
    Damped,
    /// Vertical coordinates are pinned to zero in every step.
    Horizontal,
    /// Damping plus a soft prior holding the Karcher mean in place.
    Karcher,
}

impl std::str::FromStr for GaugeMode {
    type Err = ShonanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "damped" => Ok(Self::Damped),
            "horizontal" => Ok(Self::Horizontal),
            "karcher" => Ok(Self::Karcher),
            other => Err(invalid(format!("unknown gauge mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for GaugeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Damped => "damped",
            Self::Horizontal => "horizontal",
            Self::Karcher => "karcher",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Converged once the gradient norm is at most this times `√n`.
    pub gradient_tolerance: f64,
    pub relative_decrease_tolerance: f64,
    pub pcg_max_iterations: usize,
    /// Tightest PCG relative residual.
    pub pcg_tolerance: f64,
    /// Loosest PCG relative residual, used while far from convergence.
    pub pcg_loose_tolerance: f64,
    pub gauge_mode: GaugeMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 0.1,
            gradient_tolerance: 1e-7,
            relative_decrease_tolerance: 1e-9,
            pcg_max_iterations: 200,
            pcg_tolerance: 1e-8,
            pcg_loose_tolerance: 1e-2,
            gauge_mode: GaugeMode::Damped,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_damping", self.initial_damping),
            ("gradient_tolerance", self.gradient_tolerance),
            ("relative_decrease_tolerance", self.relative_decrease_tolerance),
            ("pcg_tolerance", self.pcg_tolerance),
            ("pcg_loose_tolerance", self.pcg_loose_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.damping_increase > 1.0) {
            return Err(invalid("damping_increase must exceed 1"));
        }
        if !(self.damping_decrease > 0.0 && self.damping_decrease < 1.0) {
            return Err(invalid("damping_decrease must lie in (0, 1)"));
        }
        if self.pcg_loose_tolerance < self.pcg_tolerance {
            return Err(invalid("pcg_loose_tolerance must be >= pcg_tolerance"));
        }
        if self.max_iterations == 0 || self.pcg_max_iterations == 0 {
            return Err(invalid("iteration budgets must be positive"));
        }
        Ok(())
    }
}

/// Linearization of one edge residual `vec(Q_j P − Q_i P R̄_ij)` in the
/// body-frame tangent coordinates of its endpoints:
/// `r(δ) ≈ F_j δ_j − H_i δ_i − b_ij`.
#[derive(Debug, Clone)]
pub struct EdgeLinearization {
    pub i: usize,
    pub j: usize,
    pub f_j: DMatrix<f64>,
    pub h_i: DMatrix<f64>,
    pub b: DVector<f64>,
    pub kappa: f64,
}

pub fn linearize_edge(
    (i, j): (usize, usize),
    q_i: &Rotation,
    q_j: &Rotation,
    rbar: &Rotation,
    kappa: f64,
) -> Result<EdgeLinearization> {
    let p = q_i.dim();
    let d = rbar.dim();
    if q_j.dim() != p {
        return Err(invalid(format!(
            "endpoint dimensions differ: SO({p}) vs SO({})",
            q_j.dim()
        )));
    }
    if p < d {
        return Err(invalid(format!("lifted dimension {p} below base dimension {d}")));
    }
    let (qi, qj, r) = (q_i.matrix(), q_j.matrix(), rbar.matrix());
    let k = tangent_dim(p);
    let mut f_j = DMatrix::zeros(p * d, k);
    let mut h_i = DMatrix::zeros(p * d, k);
    for (c, (a, bb)) in generator_pairs(p).enumerate() {
        if a >= d {
            // Vertical generators: both columns stay zero.
            continue;
        }
        // Q G_ab P has Q[:, b] in column a and, if b < d, −Q[:, a] in column b.
        f_j.view_mut((a * p, c), (p, 1)).copy_from(&qj.column(bb));
        if bb < d {
            f_j.view_mut((bb * p, c), (p, 1)).copy_from(&(-qj.column(a)));
        }
        for l in 0..d {
            for row in 0..p {
                let mut v = r[(a, l)] * qi[(row, bb)];
                if bb < d {
                    v -= r[(bb, l)] * qi[(row, a)];
                }
                h_i[(l * p + row, c)] = v;
            }
        }
    }
    let s_i = qi.columns(0, d);
    let s_j = qj.columns(0, d);
    let diff = s_i * r - s_j;
    let b = DVector::from_column_slice(diff.as_slice());
    Ok(EdgeLinearization {
        i,
        j,
        f_j,
        h_i,
        b,
        kappa,
    })
}

/// Linearizes every measurement at `q`.
pub fn linearize_all(g: &MeasurementGraph, q: &LiftedAssignment) -> Result<Vec<EdgeLinearization>> {
    let blocks = q.blocks();
    g.edges()
        .iter()
        .map(|e| linearize_edge((e.i, e.j), &blocks[e.i], &blocks[e.j], &e.rotation, e.kappa))
        .collect()
}

/// Gauge prior of the karcher mode: every step pays `‖J δ‖²` with
/// `J = (√w/n) [Ad(Q_1) … Ad(Q_n)]`.
///
/// `J δ / √w` is the first-order (spatial-frame) displacement of the Karcher
/// mean of the iterate, and equals `ξ` on the global-rotation step
/// `δ_i = Ad(Q_iᵀ) ξ`. The residual is zero at every linearization point, so
/// the prior shapes steps without changing the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct KarcherPrior {
    weight: f64,
}

impl KarcherPrior {
    pub fn new(weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(invalid(format!("prior weight must be positive, got {weight}")));
        }
        Ok(Self { weight })
    }

    /// Weight `n · max κ`: a unit global rotation costs as much as a unit
    /// step on the stiffest edge.
    pub fn for_graph(g: &MeasurementGraph) -> Result<Self> {
        Self::new(g.n() as f64 * g.max_weight().max(f64::MIN_POSITIVE))
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// `k × nk` Jacobian with respect to the stacked body-frame tangents.
    pub fn jacobian(&self, q: &LiftedAssignment) -> DMatrix<f64> {
        let k = tangent_dim(q.p());
        let n = q.n();
        let scale = self.weight.sqrt() / n as f64;
        let mut jac = DMatrix::zeros(k, n * k);
        for (i, qi) in q.blocks().iter().enumerate() {
            jac.columns_mut(i * k, k).copy_from(&(manifold::adjoint(qi) * scale));
        }
        jac
    }
}

pub const KARCHER_TOLERANCE: f64 = 1e-9;
pub const KARCHER_MAX_ITERATIONS: usize = 100;

/// Fixed point of `M ← M exp((1/n) Σ vee(skew(Mᵀ Q_i)))`, started from the
/// polar factor of `Σ Q_i`.
pub fn karcher_mean(q: &LiftedAssignment, tol: f64, max_iter: usize) -> Result<Rotation> {
    let p = q.p();
    let n = q.n() as f64;
    let mut sum = DMatrix::zeros(p, p);
    for b in q.blocks() {
        sum += b.matrix();
    }
    let mut m = manifold::nearest_rotation(&sum)?.rotation;
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iter {
        let v = manifold::vee_skew_part(&(m.matrix().transpose() * &sum));
        residual = v.norm();
        if residual <= tol {
            return Ok(m);
        }
        m = manifold::retract_slice(&m, (v / n).as_slice());
    }
    Err(ShonanError::KarcherNonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Linearized prior `r(δ) = J δ`.
#[derive(Debug, Clone)]
pub struct PriorLinearization {
    pub jacobian: DMatrix<f64>,
}

impl PriorLinearization {
    pub fn new(prior: &KarcherPrior, q: &LiftedAssignment) -> Self {
        Self {
            jacobian: prior.jacobian(q),
        }
    }
}

/// Gauss-Newton normal equations `(JᵀWJ + λI) δ = JᵀW b`, assembled once
/// and solvable for several damping values.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    k: usize,
    matrix: BlockSparseSymmetric,
    rhs: Vec<f64>,
    gauge: GaugeMode,
    vertical: Vec<bool>,
    prior: Option<DMatrix<f64>>,
}

/// Solution of one damped system.
#[derive(Debug, Clone)]
pub struct NormalSolution {
    pub delta: Vec<f64>,
    /// PCG hit its iteration cap; `delta` is the best iterate seen.
    pub degraded: bool,
    pub pcg_iterations: usize,
    pub relative_residual: f64,
}

impl NormalEquations {
    pub fn assemble(
        n: usize,
        linearizations: &[EdgeLinearization],
        gauge: GaugeMode,
        prior: Option<&PriorLinearization>,
    ) -> Result<Self> {
        let first = linearizations
            .first()
            .ok_or_else(|| invalid("at least one linearization is required"))?;
        let k = first.f_j.ncols();
        let pd = first.f_j.nrows();
        let mut diagonal = vec![DMatrix::zeros(k, k); n];
        let mut off = Vec::with_capacity(linearizations.len());
        let mut rhs = vec![0.0; n * k];
        for lin in linearizations {
            if lin.i >= n || lin.j >= n || lin.i == lin.j {
                return Err(invalid(format!(
                    "linearization for edge ({}, {}) out of range",
                    lin.i, lin.j
                )));
            }
            if lin.f_j.shape() != (pd, k) || lin.h_i.shape() != (pd, k) || lin.b.len() != pd {
                return Err(invalid("linearizations have inconsistent shapes"));
            }
            let w = lin.kappa;
            let ht = lin.h_i.transpose();
            let ft = lin.f_j.transpose();
            diagonal[lin.j] += &ft * &lin.f_j * w;
            diagonal[lin.i] += &ht * &lin.h_i * w;
            off.push((lin.i, lin.j, &ht * &lin.f_j * (-w)));
            let gj = &ft * &lin.b * w;
            let gi = &ht * &lin.b * (-w);
            for c in 0..k {
                rhs[lin.j * k + c] += gj[c];
                rhs[lin.i * k + c] += gi[c];
            }
        }
        let p = (1..).find(|&p| tangent_dim(p) >= k).unwrap_or(1);
        let d = pd / p.max(1);
        let vertical: Vec<bool> = generator_pairs(p).map(|(a, _)| a >= d).collect();

        let prior_jac = match (gauge, prior) {
            (GaugeMode::Karcher, Some(pl)) => {
                if pl.jacobian.ncols() != n * k {
                    return Err(invalid("prior linearization has the wrong shape"));
                }
                Some(pl.jacobian.clone())
            }
            (GaugeMode::Karcher, None) => {
                return Err(invalid("karcher gauge mode needs a prior"));
            }
            _ => None,
        };

        if gauge == GaugeMode::Horizontal {
            for (i, r) in rhs.iter_mut().enumerate() {
                if vertical[i % k] {
                    *r = 0.0;
                }
            }
        }

        let matrix = BlockSparseSymmetric::new(n, k, diagonal, off)?;
        Ok(Self {
            k,
            matrix,
            rhs,
            gauge,
            vertical,
            prior: prior_jac,
        })
    }

    /// `JᵀW b`, i.e. minus half the cost gradient.
    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// Euclidean norm of the cost gradient in tangent coordinates.
    pub fn gradient_norm(&self) -> f64 {
        2.0 * self.rhs.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn tangent_dim(&self) -> usize {
        self.k
    }

    /// Dense undamped normal matrix, for testing.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = self.matrix.to_dense();
        if let Some(j) = &self.prior {
            m += j.transpose() * j;
        }
        m
    }

    pub fn solve(&self, lambda: f64, rel_tol: f64, max_iter: usize) -> Result<NormalSolution> {
        if !(lambda >= 0.0) || (lambda == 0.0 && self.gauge != GaugeMode::Horizontal) {
            return Err(invalid(format!("damping {lambda} not allowed in {} mode", self.gauge)));
        }
        let k = self.k;
        let masked = self.gauge == GaugeMode::Horizontal;
        let mut blocks: Vec<DMatrix<f64>> = self.matrix.diagonal_blocks().to_vec();
        if let Some(j) = &self.prior {
            for (i, block) in blocks.iter_mut().enumerate() {
                let ji = j.columns(i * k, k);
                *block += ji.transpose() * ji;
            }
        }
        for block in &mut blocks {
            for c in 0..k {
                if masked && self.vertical[c] {
                    block.row_mut(c).fill(0.0);
                    block.column_mut(c).fill(0.0);
                    block[(c, c)] = 1.0;
                } else {
                    block[(c, c)] += lambda;
                }
            }
        }
        let precond = BlockJacobi::new(&blocks)?;
        let op = DampedOperator {
            eq: self,
            lambda,
            masked,
        };
        let out = pcg::pcg(&op, &precond, &self.rhs, rel_tol, max_iter);
        let mut delta = out.x;
        if masked {
            for (i, v) in delta.iter_mut().enumerate() {
                if self.vertical[i % k] {
                    *v = 0.0;
                }
            }
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(ShonanError::NumericalFailure("non-finite step from PCG".into()));
        }
        Ok(NormalSolution {
            delta,
            degraded: !out.converged,
            pcg_iterations: out.iterations,
            relative_residual: out.relative_residual,
        })
    }
}

struct DampedOperator<'a> {
    eq: &'a NormalEquations,
    lambda: f64,
    masked: bool,
}

impl LinearOperator for DampedOperator<'_> {
    fn dim(&self) -> usize {
        self.eq.rhs.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.eq.matrix.multiply(x, y);
        if let Some(j) = &self.eq.prior {
            let jx = j * DVector::from_column_slice(x);
            let jtjx = j.tr_mul(&jx);
            for (yv, v) in y.iter_mut().zip(jtjx.iter()) {
                *yv += v;
            }
        }
        let k = self.eq.k;
        for (i, (yv, xv)) in y.iter_mut().zip(x).enumerate() {
            if self.masked && self.eq.vertical[i % k] {
                *yv = *xv;
            } else {
                *yv += self.lambda * xv;
            }
        }
    }
}

/// Assembles and solves the damped normal equations in one call.
pub fn assemble_and_solve_normal_equations(
    n: usize,
    linearizations: &[EdgeLinearization],
    lambda: f64,
    gauge: GaugeMode,
    prior: Option<&PriorLinearization>,
    cfg: &SolverConfig,
) -> Result<NormalSolution> {
    NormalEquations::assemble(n, linearizations, gauge, prior)?.solve(lambda, cfg.pcg_tolerance, cfg.pcg_max_iterations)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Converged,
    Stalled,
    IterationLimit,
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Converged => "converged",
            Self::Stalled => "stalled",
            Self::IterationLimit => "iteration-limit",
        })
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub assignment: LiftedAssignment,
    /// `f̃` at the returned assignment.
    pub cost: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub degraded_solves: usize,
    /// Objective after each accepted step, starting with the initial value.
    pub cost_history: Vec<f64>,
}

const MIN_DAMPING: f64 = 1e-12;
const MAX_DAMPING: f64 = 1e12;

/// Levenberg-Marquardt from `q0` on `f̃`. Karcher mode requires `prior`.
pub fn lm_optimize(
    g: &MeasurementGraph,
    q0: &LiftedAssignment,
    cfg: &SolverConfig,
    prior: Option<&KarcherPrior>,
) -> Result<LmOutcome> {
    cfg.validate()?;
    if q0.n() != g.n() {
        return Err(invalid(format!(
            "assignment has {} blocks, graph has {} nodes",
            q0.n(),
            g.n()
        )));
    }
    if q0.p() < g.d() {
        return Err(invalid("lifted dimension below base dimension"));
    }
    if g.num_edges() == 0 {
        let cost = 0.0;
        return Ok(LmOutcome {
            assignment: q0.clone(),
            cost,
            status: SolverStatus::Converged,
            iterations: 0,
            gradient_norm: 0.0,
            degraded_solves: 0,
            cost_history: vec![cost],
        });
    }
    let prior = match cfg.gauge_mode {
        GaugeMode::Karcher => Some(prior.ok_or_else(|| invalid("karcher gauge mode needs a prior"))?),
        _ => None,
    };
    let objective = |q: &LiftedAssignment| -> Result<f64> {
        let f = edge_cost_lifted(g, q);
        if !f.is_finite() {
            return Err(ShonanError::NumericalFailure(format!("cost evaluated to {f}")));
        }
        Ok(f)
    };
    let assemble = |q: &LiftedAssignment| -> Result<NormalEquations> {
        let lins = linearize_all(g, q)?;
        let pl = prior.map(|pr| PriorLinearization::new(pr, q));
        NormalEquations::assemble(g.n(), &lins, cfg.gauge_mode, pl.as_ref())
    };

    let tolerance = cfg.gradient_tolerance * (g.n() as f64).sqrt();
    let mut q = q0.clone();
    let mut cost = objective(&q)?;
    let mut history = vec![cost];
    let mut lambda = cfg.initial_damping;
    let mut degraded = 0usize;
    let mut initial_gradient: Option<f64> = None;

    let finish = |q: LiftedAssignment, status, iterations, gradient_norm, degraded, history| -> LmOutcome {
        let cost = edge_cost_lifted(g, &q);
        debug!("lm: {status} after {iterations} iterations, f = {cost:.6e}, |grad| = {gradient_norm:.3e}");
        LmOutcome {
            assignment: q,
            cost,
            status,
            iterations,
            gradient_norm,
            degraded_solves: degraded,
            cost_history: history,
        }
    };

    for iteration in 0..cfg.max_iterations {
        let eq = assemble(&q)?;
        let grad = eq.gradient_norm();
        if grad <= tolerance {
            return Ok(finish(q, SolverStatus::Converged, iteration, grad, degraded, history));
        }
        let g0 = *initial_gradient.get_or_insert(grad);
        let forcing = (grad / g0).clamp(cfg.pcg_tolerance, cfg.pcg_loose_tolerance);

        loop {
            let sol = eq.solve(lambda, forcing, cfg.pcg_max_iterations)?;
            if sol.degraded {
                degraded += 1;
            }
            let candidate = q.retract(&sol.delta)?;
            let candidate_cost = objective(&candidate)?;
            if candidate_cost < cost {
                let relative = (cost - candidate_cost) / cost;
                q = candidate;
                cost = candidate_cost;
                history.push(cost);
                lambda = (lambda * cfg.damping_decrease).max(MIN_DAMPING);
                if relative < cfg.relative_decrease_tolerance {
                    let grad = assemble(&q)?.gradient_norm();
                    let status = if grad <= tolerance {
                        SolverStatus::Converged
                    } else {
                        SolverStatus::Stalled
                    };
                    return Ok(finish(q, status, iteration + 1, grad, degraded, history));
                }
                break;
            }
            lambda *= cfg.damping_increase;
            if lambda > MAX_DAMPING {
                return Ok(finish(q, SolverStatus::Stalled, iteration + 1, grad, degraded, history));
            }
        }
    }
    let grad = assemble(&q)?.gradient_norm();
    let status = if grad <= tolerance {
        SolverStatus::Converged
    } else {
        SolverStatus::IterationLimit
    };
    Ok(finish(q, status, cfg.max_iterations, grad, degraded, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{random_rotation, rotation_from_axis_angle, GeneratorBasis, TangentCoords};
    use crate::problem::{Measurement, RotationAssignment};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn gaussian(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| r.sample(StandardNormal)).collect()
    }

    fn random_lifted(n: usize, p: usize, r: &mut ChaCha8Rng) -> LiftedAssignment {
        LiftedAssignment::new((0..n).map(|_| random_rotation(p, r)).collect()).unwrap()
    }

    /// Cycle plus a few chords with noisy measurements around a random truth.
    fn noisy_graph(n: usize, sigma: f64, r: &mut ChaCha8Rng) -> (MeasurementGraph, RotationAssignment) {
        let truth = RotationAssignment::new((0..n).map(|_| random_rotation(3, r)).collect()).unwrap();
        let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        for i in 0..n / 2 {
            let j = (i + n / 2 + 1) % n;
            if !pairs.iter().any(|&(a, b)| (a, b) == (i, j) || (a, b) == (j, i)) {
                pairs.push((i, j));
            }
        }
        let edges = pairs
            .into_iter()
            .map(|(i, j)| {
                let rel = truth.blocks()[i].transpose().compose(&truth.blocks()[j]).unwrap();
                let axis = Vector3::from_iterator(gaussian(r, 3));
                let noise = rotation_from_axis_angle(&axis, sigma * r.sample::<f64, _>(StandardNormal)).unwrap();
                Measurement {
                    i,
                    j,
                    rotation: rel.compose(&noise).unwrap(),
                    kappa: 1.0,
                }
            })
            .collect();
        (MeasurementGraph::new(n, 3, edges).unwrap(), truth)
    }

    fn edge_residual(qi: &Rotation, qj: &Rotation, rbar: &Rotation, d: usize) -> DVector<f64> {
        let m = qj.matrix().columns(0, d) - qi.matrix().columns(0, d) * rbar.matrix();
        DVector::from_column_slice(m.as_slice())
    }

    #[test]
    fn identity_linearization() {
        let id = Rotation::identity(3);
        let lin = linearize_edge((0, 1), &id, &id, &id, 1.0).unwrap();
        let gbar = GeneratorBasis::new(3);
        assert_eq!(lin.b, DVector::zeros(9));
        assert_eq!(&lin.f_j, gbar.matrix());
        assert_eq!(&lin.h_i, gbar.matrix());
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut r = rng(31);
        for d in [2, 3] {
            for p in d..=6 {
                for _ in 0..5 {
                    let qi = random_rotation(p, &mut r);
                    let qj = random_rotation(p, &mut r);
                    let rbar = random_rotation(d, &mut r);
                    let lin = linearize_edge((0, 1), &qi, &qj, &rbar, 1.0).unwrap();
                    let k = tangent_dim(p);
                    let (di, dj) = (gaussian(&mut r, k), gaussian(&mut r, k));
                    let h = 1e-6;
                    let eval = |t: f64| {
                        let si: Vec<f64> = di.iter().map(|x| x * t).collect();
                        let sj: Vec<f64> = dj.iter().map(|x| x * t).collect();
                        edge_residual(
                            &manifold::retract_slice(&qi, &si),
                            &manifold::retract_slice(&qj, &sj),
                            &rbar,
                            d,
                        )
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let analytic =
                        &lin.f_j * DVector::from_column_slice(&dj) - &lin.h_i * DVector::from_column_slice(&di);
                    let rel = (&fd - &analytic).norm() / analytic.norm();
                    assert!(rel < 1e-5, "p={p} d={d}: {rel}");
                    // residual at zero equals −b
                    assert!((eval(0.0) + &lin.b).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn vertical_columns_are_zero() {
        let mut r = rng(32);
        for (p, d, expected) in [(5, 3, 1), (6, 3, 3), (3, 3, 0), (4, 2, 1)] {
            let lin = linearize_edge(
                (0, 1),
                &random_rotation(p, &mut r),
                &random_rotation(p, &mut r),
                &random_rotation(d, &mut r),
                1.0,
            )
            .unwrap();
            let zero_f = (0..lin.f_j.ncols())
                .filter(|&c| lin.f_j.column(c).amax() == 0.0)
                .count();
            let zero_h = (0..lin.h_i.ncols())
                .filter(|&c| lin.h_i.column(c).amax() == 0.0)
                .count();
            assert_eq!(zero_f, expected);
            assert_eq!(zero_h, expected);
            let k = tangent_dim(p);
            for c in k - expected..k {
                assert_eq!(lin.f_j.column(c).amax(), 0.0);
            }
            // FᵀF = diag([a<d] + [b<d])
            let ftf = lin.f_j.transpose() * &lin.f_j;
            for (c, (a, b)) in generator_pairs(p).enumerate() {
                let expect = (a < d) as u8 as f64 + (b < d) as u8 as f64;
                assert!((ftf[(c, c)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut r = rng(33);
        assert!(linearize_edge(
            (0, 1),
            &random_rotation(4, &mut r),
            &random_rotation(5, &mut r),
            &random_rotation(3, &mut r),
            1.0
        )
        .is_err());
        assert!(linearize_edge(
            (0, 1),
            &random_rotation(2, &mut r),
            &random_rotation(2, &mut r),
            &random_rotation(3, &mut r),
            1.0
        )
        .is_err());
    }

    /// Dense `(JᵀWJ + λI)` and `JᵀWb` built from stacked Jacobians.
    fn dense_system(n: usize, lins: &[EdgeLinearization], lambda: f64) -> (DMatrix<f64>, DVector<f64>) {
        let k = lins[0].f_j.ncols();
        let pd = lins[0].f_j.nrows();
        let mut j = DMatrix::zeros(pd * lins.len(), n * k);
        let mut b = DVector::zeros(pd * lins.len());
        let mut w = DVector::zeros(pd * lins.len());
        for (e, lin) in lins.iter().enumerate() {
            j.view_mut((e * pd, lin.j * k), (pd, k)).copy_from(&lin.f_j);
            j.view_mut((e * pd, lin.i * k), (pd, k)).copy_from(&(-&lin.h_i));
            b.rows_mut(e * pd, pd).copy_from(&lin.b);
            w.rows_mut(e * pd, pd).fill(lin.kappa);
        }
        let jw = j.transpose() * DMatrix::from_diagonal(&w);
        let a = &jw * &j + DMatrix::identity(n * k, n * k) * lambda;
        (a, jw * b)
    }

    #[test]
    fn pcg_matches_dense_solve() {
        let mut r = rng(34);
        let (g, _) = noisy_graph(6, 0.3, &mut r);
        for p in [3, 5] {
            let q = random_lifted(6, p, &mut r);
            let lins = linearize_all(&g, &q).unwrap();
            let cfg = SolverConfig {
                pcg_tolerance: 1e-12,
                pcg_loose_tolerance: 1e-12,
                ..Default::default()
            };
            let lambda = 1e-3;
            let sol = assemble_and_solve_normal_equations(6, &lins, lambda, GaugeMode::Damped, None, &cfg).unwrap();
            assert!(!sol.degraded);
            let (a, rhs) = dense_system(6, &lins, lambda);
            let exact = a.cholesky().unwrap().solve(&rhs);
            let err = (DVector::from_column_slice(&sol.delta) - &exact).norm() / exact.norm();
            assert!(err < 1e-8, "p={p}: {err}");
        }
    }

    #[test]
    fn zero_residual_gives_zero_step() {
        let mut r = rng(35);
        let (g, truth) = noisy_graph(5, 0.0, &mut r);
        let q = LiftedAssignment::from_rotations(&truth, 4).unwrap();
        let lins: Vec<_> = linearize_all(&g, &q)
            .unwrap()
            .into_iter()
            .map(|mut l| {
                l.b.fill(0.0);
                l
            })
            .collect();
        let sol =
            assemble_and_solve_normal_equations(5, &lins, 1e-4, GaugeMode::Damped, None, &SolverConfig::default())
                .unwrap();
        assert!(sol.delta.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tikhonov_shrinkage() {
        let mut r = rng(36);
        let (g, _) = noisy_graph(8, 0.2, &mut r);
        let q = random_lifted(8, 4, &mut r);
        let eq = NormalEquations::assemble(8, &linearize_all(&g, &q).unwrap(), GaugeMode::Damped, None).unwrap();
        let norms: Vec<f64> = [1e-4, 1e-2, 1.0, 100.0]
            .iter()
            .map(|&l| {
                let s = eq.solve(l, 1e-12, 500).unwrap();
                s.delta.iter().map(|x| x * x).sum::<f64>().sqrt()
            })
            .collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
    }

    #[test]
    fn horizontal_mode_pins_vertical_coordinates() {
        let mut r = rng(37);
        let (g, _) = noisy_graph(6, 0.2, &mut r);
        let q = random_lifted(6, 6, &mut r);
        let lins = linearize_all(&g, &q).unwrap();
        let eq = NormalEquations::assemble(6, &lins, GaugeMode::Horizontal, None).unwrap();
        let k = tangent_dim(6);
        let vertical: Vec<bool> = generator_pairs(6).map(|(a, _)| a >= 3).collect();
        for lambda in [0.0, 1e-3] {
            let sol = eq.solve(lambda, 1e-10, 500).unwrap();
            for (i, v) in sol.delta.iter().enumerate() {
                if vertical[i % k] {
                    assert_eq!(*v, 0.0);
                }
            }
        }
        assert!(NormalEquations::assemble(6, &lins, GaugeMode::Damped, None)
            .unwrap()
            .solve(0.0, 1e-8, 10)
            .is_err());
    }

    #[test]
    fn damped_step_beats_its_gauge_free_projection() {
        let mut r = rng(38);
        let (g, _) = noisy_graph(7, 0.2, &mut r);
        let p = 4;
        let q = random_lifted(7, p, &mut r);
        let lins = linearize_all(&g, &q).unwrap();
        let lambda = 1e-2;
        let eq = NormalEquations::assemble(7, &lins, GaugeMode::Damped, None).unwrap();
        let delta = DVector::from_vec(eq.solve(lambda, 1e-12, 1000).unwrap().delta);
        let (a, rhs) = dense_system(7, &lins, lambda);
        let model = |x: &DVector<f64>| (x.transpose() * &a * x)[(0, 0)] - 2.0 * rhs.dot(x);

        // global symmetry directions δ_i = vee(Q_iᵀ Ω Q_i)
        let k = tangent_dim(p);
        let mut basis = DMatrix::zeros(7 * k, k);
        for c in 0..k {
            let omega = manifold::hat(&TangentCoords::basis(p, c).unwrap());
            for (i, qi) in q.blocks().iter().enumerate() {
                let local = manifold::vee_skew_part(&(qi.matrix().transpose() * &omega * qi.matrix()));
                basis.view_mut((i * k, c), (k, 1)).copy_from(&local);
            }
        }
        let qr = basis.qr();
        let qm = qr.q();
        let gauge_part = &qm * (qm.transpose() * &delta);
        let projected = &delta - gauge_part;
        assert!(model(&delta) <= model(&projected) + 1e-10);
        // the gradient is orthogonal to the symmetry directions
        let grad = DVector::from_column_slice(eq.rhs());
        assert!((qm.transpose() * grad).norm() < 1e-9);
    }

    #[test]
    fn karcher_mean_cases() {
        let mut r = rng(39);
        let q0 = random_rotation(4, &mut r);
        let same = LiftedAssignment::new(vec![q0.clone(); 4]).unwrap();
        let m = karcher_mean(&same, 1e-10, 50).unwrap();
        assert!((m.matrix() - q0.matrix()).norm() < 1e-12);

        let theta = 0.2;
        let pair = LiftedAssignment::new(vec![
            rotation_from_axis_angle(&Vector3::z(), theta).unwrap(),
            rotation_from_axis_angle(&Vector3::z(), -theta).unwrap(),
        ])
        .unwrap();
        let m = karcher_mean(&pair, 1e-10, 50).unwrap();
        assert!((m.matrix() - DMatrix::identity(3, 3)).norm() < 1e-10);

        let center = random_rotation(3, &mut r);
        let cluster = LiftedAssignment::new(
            (0..5)
                .map(|_| {
                    let axis = Vector3::from_iterator(gaussian(&mut r, 3));
                    let angle = 0.3 * r.random::<f64>();
                    center
                        .compose(&rotation_from_axis_angle(&axis, angle).unwrap())
                        .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let m = karcher_mean(&cluster, 1e-10, 100).unwrap();
        let residual: DVector<f64> = cluster
            .blocks()
            .iter()
            .map(|qi| manifold::vee_skew_part(&(m.matrix().transpose() * qi.matrix())))
            .fold(DVector::zeros(3), |acc, v| acc + v);
        assert!(residual.norm() < 1e-8);
    }

    #[test]
    fn prior_measures_the_global_rotation_component() {
        let mut r = rng(40);
        let (p, n) = (5, 4);
        let k = tangent_dim(p);
        let q = random_lifted(n, p, &mut r);
        let prior = KarcherPrior::new(3.0).unwrap();
        let jac = prior.jacobian(&q);
        // δ_i = Ad(Q_iᵀ) ξ is the left multiplication by exp(ξ)
        let xi = DVector::from_vec(gaussian(&mut r, k));
        let mut delta = DVector::zeros(n * k);
        for (i, qi) in q.blocks().iter().enumerate() {
            delta
                .rows_mut(i * k, k)
                .copy_from(&(manifold::adjoint(&qi.transpose()) * &xi));
        }
        assert!((&jac * &delta - &xi * 3f64.sqrt()).norm() < 1e-12);
        let moved = q.retract(delta.as_slice()).unwrap();
        let g = Rotation::from_matrix(manifold::exp_skew(&manifold::hat_slice(p, xi.as_slice()))).unwrap();
        let expected = q.left_multiply(&g).unwrap();
        for (a, b) in moved.blocks().iter().zip(expected.blocks()) {
            assert!((a.matrix() - b.matrix()).norm() < 1e-12);
        }
        // steps orthogonal to every global rotation are free
        let basis = &jac.transpose();
        let mut free = DVector::from_vec(gaussian(&mut r, n * k));
        let coeffs = basis.clone().qr().q().transpose() * &free;
        free -= basis.clone().qr().q() * coeffs;
        assert!((&jac * free).norm() < 1e-12);
    }

    #[test]
    fn noiseless_start_at_truth_converges_immediately() {
        let mut r = rng(41);
        let (g, truth) = noisy_graph(10, 0.0, &mut r);
        let q0 = LiftedAssignment::from_rotations(&truth, 5).unwrap();
        let out = lm_optimize(&g, &q0, &SolverConfig::default(), None).unwrap();
        assert!(out.iterations <= 1);
        assert!(out.cost < 1e-10);
        assert_eq!(out.status, SolverStatus::Converged);
    }

    fn cost_along(g: &MeasurementGraph, q: &LiftedAssignment, dir: &[f64], t: f64) -> f64 {
        let scaled: Vec<f64> = dir.iter().map(|x| x * t).collect();
        edge_cost_lifted(g, &q.retract(&scaled).unwrap())
    }

    #[test]
    fn random_start_reaches_stationary_point() {
        let mut r = rng(42);
        let (g, _) = noisy_graph(20, 0.2, &mut r);
        let q0 = random_lifted(20, 5, &mut r);
        let cfg = SolverConfig::default();
        let out = lm_optimize(&g, &q0, &cfg, None).unwrap();
        assert_eq!(out.status, SolverStatus::Converged, "{out:?}");
        assert!(out.cost <= edge_cost_lifted(&g, &q0));
        assert!(out.cost_history.windows(2).all(|w| w[1] < w[0]));
        for b in out.assignment.blocks() {
            assert!(manifold::orthonormality_error(b.matrix()) < 1e-9);
            assert!(b.matrix().determinant() > 0.0);
        }
        let tolerance = cfg.gradient_tolerance * (20f64).sqrt();
        let k = tangent_dim(5);
        for _ in 0..20 {
            let mut dir = gaussian(&mut r, 20 * k);
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|x| *x /= norm);
            let h = 1e-5;
            let deriv =
                (cost_along(&g, &out.assignment, &dir, h) - cost_along(&g, &out.assignment, &dir, -h)) / (2.0 * h);
            assert!(deriv.abs() <= 10.0 * tolerance, "{deriv}");
        }
    }

    #[test]
    fn karcher_mode_runs_and_holds_the_mean() {
        let mut r = rng(43);
        let (g, _) = noisy_graph(12, 0.1, &mut r);
        let q0 = random_lifted(12, 4, &mut r);
        let prior = KarcherPrior::for_graph(&g).unwrap();
        assert_eq!(prior.weight(), 12.0);
        let cfg = SolverConfig {
            gauge_mode: GaugeMode::Karcher,
            ..Default::default()
        };
        let out = lm_optimize(&g, &q0, &cfg, Some(&prior)).unwrap();
        assert!(out.gradient_norm < 1e-5, "{}", out.gradient_norm);
        assert!(out.cost < edge_cost_lifted(&g, &q0));
        assert!(out.cost_history.windows(2).all(|w| w[1] < w[0]));
        assert!(lm_optimize(&g, &q0, &cfg, None).is_err());
    }

    #[test]
    fn deterministic_iterates() {
        let mut r = rng(44);
        let (g, _) = noisy_graph(15, 0.3, &mut r);
        let q0 = random_lifted(15, 5, &mut r);
        let a = lm_optimize(&g, &q0, &SolverConfig::default(), None).unwrap();
        let b = lm_optimize(&g, &q0, &SolverConfig::default(), None).unwrap();
        assert_eq!(a.cost_history, b.cost_history);
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            damping_increase: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            pcg_tolerance: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
