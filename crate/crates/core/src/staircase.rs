//! The Riemannian staircase: local optimization at level p, certification,
//! saddle escape to p + 1, and rounding of the final factor.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::DMatrix;

use crate::certifier::{
    build_certificate, certify, min_eigenpair, CertificateMatrix, CertificateVerdict, EigenConfig, VerdictKind,
    DEFAULT_THRESHOLD,
};
use crate::error::{invalid, Result, ShonanError};
use crate::local_solver::{lm_optimize, GaugeMode, KarcherPrior, SolverConfig, SolverStatus};
use crate::manifold::{escape_tangent, nearest_rotation, tangent_dim};
use crate::problem::{
    build_connection_laplacian, cost, edge_cost_lifted, suboptimality_gap, ConnectionLaplacian, Factor,
    LiftedAssignment, MeasurementGraph, RotationAssignment, StiefelAssignment,
};

/// Relative tolerance of [`exactness_check`] used by the staircase.
pub const EXACTNESS_TOL: f64 = 1e-6;
/// `σ_d / σ_1` below which a factor is treated as rank deficient.
pub const DEGENERATE_RATIO: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct EscapeConfig {
    pub initial_step: f64,
    pub backtrack: f64,
    pub max_trials: usize,
    /// `c` in the acceptance test `f̃(t) < f̃(0) − c·t²·|λ_min|`.
    pub sufficient_decrease: f64,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            backtrack: 0.5,
            max_trials: 30,
            sufficient_decrease: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaircaseConfig {
    pub p_min: usize,
    /// Clamped to `dn + 1` at solve time.
    pub p_max: usize,
    /// When false, a single level is solved and its certificate reported.
    pub ascend: bool,
    pub threshold: f64,
    pub escape: EscapeConfig,
    pub solver: SolverConfig,
    pub eigen: EigenConfig,
}

impl Default for StaircaseConfig {
    fn default() -> Self {
        Self {
            p_min: 5,
            p_max: 30,
            ascend: true,
            threshold: DEFAULT_THRESHOLD,
            escape: EscapeConfig::default(),
            solver: SolverConfig::default(),
            eigen: EigenConfig::default(),
        }
    }
}

impl StaircaseConfig {
    /// Effective `p_max` for a problem with `n` nodes in SO(d).
    pub fn p_ceiling(&self, n: usize, d: usize) -> usize {
        self.p_max.min(d * n + 1)
    }

    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        self.solver.validate()?;
        if self.p_min < d {
            return Err(invalid(format!("p_min = {} is below d = {d}", self.p_min)));
        }
        if self.p_min > self.p_ceiling(n, d) {
            return Err(invalid(format!(
                "p_min = {} exceeds p_max = {} (ceiling dn+1 = {})",
                self.p_min,
                self.p_max,
                d * n + 1
            )));
        }
        if !self.threshold.is_finite() || self.threshold > 0.0 {
            return Err(invalid(format!(
                "certificate threshold must be finite and <= 0, got {}",
                self.threshold
            )));
        }
        let e = &self.escape;
        if !(e.initial_step > 0.0) || !(e.backtrack > 0.0 && e.backtrack < 1.0) || e.max_trials == 0 {
            return Err(invalid(
                "escape line search needs step > 0, backtrack in (0,1), trials > 0",
            ));
        }
        if !(e.sufficient_decrease >= 0.0) {
            return Err(invalid("sufficient-decrease constant must be non-negative"));
        }
        Ok(())
    }
}

/// Solver presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Staircase from p = 5.
    Sa,
    /// Staircase from p = 3.
    Sl,
    S3,
    S4,
    S5,
    /// `Sa` with the Karcher-mean gauge prior.
    Sk,
    /// Plain LM on SO(3)^n; same as `S3`.
    Lm,
}

impl Method {
    pub const ALL: [Method; 7] = [Self::Sa, Self::Sl, Self::S3, Self::S4, Self::S5, Self::Sk, Self::Lm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sa => "sa",
            Self::Sl => "sl",
            Self::S3 => "s3",
            Self::S4 => "s4",
            Self::S5 => "s5",
            Self::Sk => "sk",
            Self::Lm => "lm",
        }
    }

    /// `(p_min, p_max, ascend)`.
    pub fn levels(self) -> (usize, usize, bool) {
        match self {
            Self::Sa | Self::Sk => (5, 30, true),
            Self::Sl => (3, 30, true),
            Self::S3 | Self::Lm => (3, 3, false),
            Self::S4 => (4, 4, false),
            Self::S5 => (5, 5, false),
        }
    }

    pub fn gauge(self) -> GaugeMode {
        match self {
            Self::Sk => GaugeMode::Karcher,
            _ => GaugeMode::Damped,
        }
    }

    pub fn config(self) -> StaircaseConfig {
        let (p_min, p_max, ascend) = self.levels();
        let mut cfg = StaircaseConfig {
            p_min,
            p_max,
            ascend,
            ..StaircaseConfig::default()
        };
        cfg.solver.gauge_mode = self.gauge();
        cfg
    }
}

impl FromStr for Method {
    type Err = ShonanError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method '{s}'")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One rung of the staircase.
#[derive(Debug, Clone)]
pub struct LevelRecord {
    pub p: usize,
    /// `f̃` at the local-solver output.
    pub cost: f64,
    pub lm_status: SolverStatus,
    pub lm_iterations: usize,
    pub lambda_min: f64,
    pub eig_converged: bool,
    pub eig_matvecs: usize,
    pub opt_time_s: f64,
    pub eig_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct EscapeOutcome {
    pub assignment: LiftedAssignment,
    pub step: f64,
    pub trials: usize,
    pub cost_before: f64,
    pub cost_after: f64,
}

#[derive(Debug, Clone)]
pub struct EscapeRecord {
    pub p_from: usize,
    /// The uncertified critical point that was escaped.
    pub saddle: LiftedAssignment,
    /// Unit eigenvector of the certificate used for the escape.
    pub v_min: Vec<f64>,
    pub lambda_min: f64,
    pub step: f64,
    pub trials: usize,
    pub cost_before: f64,
    pub cost_after: f64,
}

#[derive(Debug, Clone)]
pub struct Rounding {
    pub rotations: RotationAssignment,
    /// Blocks of `U_dᵀS` with positive determinant, before and after the vote.
    pub positive_before_vote: usize,
    pub positive_after_vote: usize,
    pub reflected: bool,
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub rotations: RotationAssignment,
    /// `f̃` of the rounded estimate.
    pub f_hat: f64,
    /// `tr(L̄ SᵀS)` at the certified factor; `None` when uncertified.
    pub f_sdp: Option<f64>,
    /// Last critical point found, on SO(p_final)^n.
    pub critical: LiftedAssignment,
    /// `f̃` at `critical`.
    pub f_critical: f64,
    pub lambda_min: f64,
    pub p_min: usize,
    pub p_final: usize,
    pub certified: bool,
    pub verdict: VerdictKind,
    pub suboptimality: Option<f64>,
    pub exact: Option<bool>,
    pub opt_time_s: f64,
    pub eig_time_s: f64,
    pub levels: Vec<LevelRecord>,
    pub escapes: Vec<EscapeRecord>,
    pub stiefel: StiefelAssignment,
    pub rounding: Rounding,
}

impl SolveResult {
    pub fn lm_iterations(&self) -> usize {
        self.levels.iter().map(|l| l.lm_iterations).sum()
    }
}

/// `|f_hat − f_sdp| ≤ rel_tol · max(1, |f_sdp|)`.
pub fn exactness_check(f_hat: f64, f_sdp: f64, rel_tol: f64) -> bool {
    (f_hat - f_sdp).abs() <= rel_tol * f_sdp.abs().max(1.0)
}

/// Rank-d truncated SVD rounding with a determinant vote and blockwise
/// projection onto SO(d).
pub fn round_solution(s: &StiefelAssignment) -> Result<RotationAssignment> {
    round_solution_detailed(s).map(|r| r.rotations)
}

pub fn round_solution_detailed(s: &StiefelAssignment) -> Result<Rounding> {
    let (p, d, n) = (s.p(), s.d(), s.n());
    let m = s.to_matrix();
    let svd = m.clone().svd(true, false);
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| ShonanError::NumericalFailure("SVD did not return U".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let ratio = if singular_values.len() < d || singular_values[0] == 0.0 {
        0.0
    } else {
        singular_values[d - 1] / singular_values[0]
    };
    if !(ratio >= DEGENERATE_RATIO) {
        return Err(ShonanError::DegenerateFactor { ratio });
    }
    let mut ud = DMatrix::zeros(p, d);
    for (c, &k) in order.iter().take(d).enumerate() {
        ud.set_column(c, &u.column(k));
    }
    let mut r = ud.transpose() * m;
    let count_positive = |r: &DMatrix<f64>| {
        (0..n)
            .filter(|&i| r.view((0, i * d), (d, d)).determinant() > 0.0)
            .count()
    };
    let positive_before_vote = count_positive(&r);
    let reflected = positive_before_vote < n.div_ceil(2);
    if reflected {
        r.row_mut(d - 1).neg_mut();
    }
    let positive_after_vote = count_positive(&r);
    let blocks = (0..n)
        .map(|i| nearest_rotation(&r.view((0, i * d), (d, d)).into_owned()).map(|nr| nr.rotation))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rounding {
        rotations: RotationAssignment::new(blocks)?,
        positive_before_vote,
        positive_after_vote,
        reflected,
        singular_values,
    })
}

/// Stacked body-frame tangent at `Q⁺` that moves the projected factor along
/// `[0; vᵀ]`. `v` is split into n consecutive d-vectors.
pub fn escape_direction(q_plus: &LiftedAssignment, v: &[f64], d: usize) -> Result<Vec<f64>> {
    let n = q_plus.n();
    if v.len() != n * d {
        return Err(invalid(format!(
            "eigenvector has {} entries, expected {}",
            v.len(),
            n * d
        )));
    }
    let k = tangent_dim(q_plus.p());
    let mut out = Vec::with_capacity(n * k);
    for (q, vi) in q_plus.blocks().iter().zip(v.chunks(d)) {
        out.extend_from_slice(escape_tangent(q, vi)?.as_slice());
    }
    Ok(out)
}

/// Lifts `q` one level and backtracks along the negative-curvature direction
/// given by the certificate eigenvector until the cost drops sufficiently.
pub fn escape_saddle(
    g: &MeasurementGraph,
    q: &LiftedAssignment,
    v_min: &[f64],
    lambda_min: f64,
    cfg: &EscapeConfig,
) -> Result<EscapeOutcome> {
    if !(lambda_min < 0.0) {
        return Err(invalid(format!(
            "escape needs negative curvature, got λ_min = {lambda_min}"
        )));
    }
    let norm = v_min.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(invalid("escape direction is zero or non-finite"));
    }
    let v: Vec<f64> = v_min.iter().map(|x| x / norm).collect();
    let q_plus = q.lift();
    let direction = escape_direction(&q_plus, &v, g.d())?;
    let f0 = edge_cost_lifted(g, &q_plus);
    let mut t = cfg.initial_step;
    let mut step = vec![0.0; direction.len()];
    for trial in 1..=cfg.max_trials {
        for (s, x) in step.iter_mut().zip(&direction) {
            *s = t * x;
        }
        let candidate = q_plus.retract(&step)?;
        let f = edge_cost_lifted(g, &candidate);
        debug!("escape trial {trial}: t = {t:.3e}, f = {f:.12e} (f0 = {f0:.12e})");
        if f < f0 - cfg.sufficient_decrease * t * t * lambda_min.abs() {
            return Ok(EscapeOutcome {
                assignment: candidate,
                step: t,
                trials: trial,
                cost_before: f0,
                cost_after: f,
            });
        }
        t *= cfg.backtrack;
    }
    Err(ShonanError::EscapeFailed { trials: cfg.max_trials })
}

struct Certification {
    verdict: CertificateVerdict,
    time_s: f64,
}

fn run_certifier(
    c: &CertificateMatrix,
    eigen: &EigenConfig,
    threshold: f64,
    warm: Option<&[f64]>,
) -> Result<Certification> {
    let start = Instant::now();
    let eig = min_eigenpair(c, eigen, warm)?;
    let mut verdict = certify(eig, threshold);
    if verdict.kind == VerdictKind::Indeterminate {
        // A Ritz value is an upper bound on λ_min, so a low one settles it.
        if verdict.lambda_min < threshold {
            verdict.kind = VerdictKind::NotCertified;
        } else {
            let retry = EigenConfig {
                max_iterations: eigen.max_iterations.saturating_mul(4),
                ..eigen.clone()
            };
            warn!(
                "eigensolver did not converge; retrying with budget {}",
                retry.max_iterations
            );
            let again = min_eigenpair(c, &retry, Some(verdict.eigenpair.vector.as_slice()))?;
            verdict = certify(again, threshold);
            if verdict.kind == VerdictKind::Indeterminate && verdict.lambda_min < threshold {
                verdict.kind = VerdictKind::NotCertified;
            }
        }
    }
    Ok(Certification {
        verdict,
        time_s: start.elapsed().as_secs_f64(),
    })
}

/// Runs the staircase from `q0`, which must sit at level `cfg.p_min`.
pub fn shonan_averaging(g: &MeasurementGraph, q0: &LiftedAssignment, cfg: &StaircaseConfig) -> Result<SolveResult> {
    let (n, d) = (g.n(), g.d());
    cfg.validate(n, d)?;
    if q0.n() != n {
        return Err(invalid(format!(
            "initial assignment has {} blocks, graph has {n} nodes",
            q0.n()
        )));
    }
    if q0.p() != cfg.p_min {
        return Err(invalid(format!(
            "initial assignment is at level {}, expected p_min = {}",
            q0.p(),
            cfg.p_min
        )));
    }
    let l = build_connection_laplacian(g);
    let p_max = cfg.p_ceiling(n, d);

    let mut q = q0.clone();
    let mut levels = Vec::new();
    let mut escapes = Vec::new();
    let (mut opt_time, mut eig_time) = (0.0, 0.0);

    let (stiefel, f_critical, verdict) = loop {
        let p = q.p();
        let start = Instant::now();
        let prior = match cfg.solver.gauge_mode {
            GaugeMode::Karcher => Some(KarcherPrior::for_graph(g)?),
            _ => None,
        };
        let lm = lm_optimize(g, &q, &cfg.solver, prior.as_ref())?;
        let level_opt = start.elapsed().as_secs_f64();
        opt_time += level_opt;
        q = lm.assignment;

        let s = q.project(d)?;
        let c = build_certificate(&l, &s)?;
        // No warm start across levels: after an escape the previous v_min lies in
        // the row space of S and is an exact null vector of the new certificate.
        let cert = run_certifier(&c, &cfg.eigen, cfg.threshold, None)?;
        eig_time += cert.time_s;
        let mut verdict = cert.verdict;
        info!(
            "level p = {p}: f = {:.9e}, LM {} after {} iterations, λ_min = {:.3e} ({:?})",
            lm.cost, lm.status, lm.iterations, verdict.lambda_min, verdict.kind
        );
        levels.push(LevelRecord {
            p,
            cost: lm.cost,
            lm_status: lm.status,
            lm_iterations: lm.iterations,
            lambda_min: verdict.lambda_min,
            eig_converged: verdict.eigenpair.converged,
            eig_matvecs: verdict.eigenpair.iterations,
            opt_time_s: level_opt,
            eig_time_s: cert.time_s,
        });

        if verdict.certified() || verdict.kind == VerdictKind::Indeterminate || !cfg.ascend {
            break (s, lm.cost, verdict);
        }
        if p + 1 > p_max {
            warn!("reached p_max = {p_max} without a certificate");
            break (s, lm.cost, verdict);
        }
        let escaped = match escape_saddle(
            g,
            &q,
            verdict.eigenpair.vector.as_slice(),
            verdict.lambda_min,
            &cfg.escape,
        ) {
            Ok(e) => e,
            Err(ShonanError::EscapeFailed { trials }) => {
                warn!("escape failed after {trials} trials; refining the eigenpair");
                let tight = EigenConfig {
                    tolerance: cfg.eigen.tolerance / 100.0,
                    max_iterations: cfg.eigen.max_iterations.saturating_mul(4),
                    ..cfg.eigen.clone()
                };
                let start = Instant::now();
                let eig = min_eigenpair(&c, &tight, Some(verdict.eigenpair.vector.as_slice()))?;
                eig_time += start.elapsed().as_secs_f64();
                verdict = certify(eig, cfg.threshold);
                if verdict.certified() || verdict.lambda_min >= 0.0 {
                    break (s, lm.cost, verdict);
                }
                match escape_saddle(
                    g,
                    &q,
                    verdict.eigenpair.vector.as_slice(),
                    verdict.lambda_min,
                    &cfg.escape,
                ) {
                    Ok(e) => e,
                    Err(ShonanError::EscapeFailed { .. }) => {
                        warn!("escape failed twice at p = {p}; stopping uncertified");
                        verdict.kind = VerdictKind::NotCertified;
                        break (s, lm.cost, verdict);
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        };
        debug!(
            "escaped to p = {} with t = {:.3e}: {:.9e} -> {:.9e}",
            p + 1,
            escaped.step,
            escaped.cost_before,
            escaped.cost_after
        );
        let norm = verdict.eigenpair.vector.norm();
        escapes.push(EscapeRecord {
            p_from: p,
            saddle: q.clone(),
            v_min: verdict.eigenpair.vector.iter().map(|x| x / norm).collect(),
            lambda_min: verdict.lambda_min,
            step: escaped.step,
            trials: escaped.trials,
            cost_before: escaped.cost_before,
            cost_after: escaped.cost_after,
        });
        q = escaped.assignment;
    };

    finish(
        &l, q, stiefel, f_critical, verdict, cfg.p_min, levels, escapes, opt_time, eig_time,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    l: &ConnectionLaplacian,
    critical: LiftedAssignment,
    stiefel: StiefelAssignment,
    f_critical: f64,
    verdict: CertificateVerdict,
    p_min: usize,
    levels: Vec<LevelRecord>,
    escapes: Vec<EscapeRecord>,
    opt_time_s: f64,
    eig_time_s: f64,
) -> Result<SolveResult> {
    let rounding = round_solution_detailed(&stiefel)?;
    let f_hat = cost(l, &rounding.rotations)?;
    let certified = verdict.certified();
    let (f_sdp, suboptimality, exact) = if certified {
        let f_sdp = cost(l, &stiefel)?;
        let gap = suboptimality_gap(f_hat, f_sdp)?;
        (
            Some(f_sdp),
            Some(gap),
            Some(exactness_check(f_hat, f_sdp, EXACTNESS_TOL)),
        )
    } else {
        (None, None, None)
    };
    Ok(SolveResult {
        rotations: rounding.rotations.clone(),
        f_hat,
        f_sdp,
        critical,
        f_critical,
        lambda_min: verdict.lambda_min,
        p_min,
        p_final: stiefel.p(),
        certified,
        verdict: verdict.kind,
        suboptimality,
        exact,
        opt_time_s,
        eig_time_s,
        levels,
        escapes,
        stiefel,
        rounding,
    })
}
