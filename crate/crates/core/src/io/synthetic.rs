//! Synthetic cycle-graph instances and random initializations.

use std::collections::HashSet;
use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{invalid, Result};
use crate::io::g2o::{angle_roundtrips, quaternion_roundtrips, rotation2, rotation_from_quaternion};
use crate::manifold::{self, lift_rotation, random_rotation, Rotation};
use crate::problem::{LiftedAssignment, Measurement, MeasurementGraph, RotationAssignment};

const GRAPH_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

/// RNG for problem generation; independent of the initialization stream.
pub fn graph_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(GRAPH_STREAM);
    rng
}

/// RNG for random initial assignments.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Standard deviation of the injected rotation angle, in radians.
    pub sigma: f64,
    /// Extra random edges on top of the cycle.
    pub chords: usize,
    pub kappa: f64,
    pub d: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn cycle(n: usize, sigma: f64, seed: u64) -> Self {
        Self {
            n,
            sigma,
            chords: 0,
            kappa: 1.0,
            d: 3,
            seed,
        }
    }

    pub fn with_chords(mut self, chords: usize) -> Self {
        self.chords = chords;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(invalid(format!("synthetic graphs need n >= 2, got {}", self.n)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(invalid(format!("kappa must be > 0, got {}", self.kappa)));
        }
        if !(self.d == 2 || self.d == 3) {
            return Err(invalid(format!("d must be 2 or 3, got {}", self.d)));
        }
        let cycle_edges = if self.n == 2 { 1 } else { self.n };
        let max_edges = self.n * (self.n - 1) / 2;
        if cycle_edges + self.chords > max_edges {
            return Err(invalid(format!(
                "{} chords do not fit in a graph with {} nodes",
                self.chords, self.n
            )));
        }
        Ok(())
    }
}

/// Heading of node i: tangent to the circle at angle 2πi/n.
fn heading(i: usize, n: usize) -> f64 {
    2.0 * PI * i as f64 / n as f64 + PI / 2.0
}

fn planar(d: usize, angle: f64) -> Rotation {
    if d == 2 {
        rotation2(angle)
    } else {
        manifold::rotation_from_axis_angle(&Vector3::z(), angle).expect("z axis is nonzero")
    }
}

/// Nudges a measurement by ulps until its g2o encoding is bitwise lossless.
fn encodable(m: &Rotation) -> Rotation {
    match m.dim() {
        2 => {
            let mut theta = m.matrix()[(1, 0)].atan2(m.matrix()[(0, 0)]);
            loop {
                if angle_roundtrips(theta) {
                    return rotation2(theta);
                }
                theta = theta.next_up();
            }
        }
        _ => {
            let q = super::g2o::quaternion_from_rotation(m);
            let mut w = q[3];
            loop {
                let candidate = [q[0], q[1], q[2], w];
                let r = rotation_from_quaternion(candidate);
                if quaternion_roundtrips(&r) {
                    return r;
                }
                w = w.next_up();
            }
        }
    }
}

/// Cycle graph (plus optional chords) around a circular trajectory with
/// measurements `R̄_ij = R_iᵀ R_j exp(θ a)`, `a` uniform on the sphere and
/// `θ ~ N(0, σ²)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(MeasurementGraph, RotationAssignment)> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.d);
    let mut rng = graph_rng(spec.seed);
    let truth = RotationAssignment::new((0..n).map(|i| planar(d, heading(i, n))).collect())?;

    let mut pairs: Vec<(usize, usize)> = if n == 2 {
        vec![(0, 1)]
    } else {
        (0..n).map(|i| (i, (i + 1) % n)).collect()
    };
    let mut seen: HashSet<(usize, usize)> = pairs.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
    while pairs.len() < (if n == 2 { 1 } else { n }) + spec.chords {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i != j && seen.insert((i.min(j), i.max(j))) {
            pairs.push((i.min(j), i.max(j)));
        }
    }

    let noise = Normal::new(0.0, spec.sigma).map_err(|e| invalid(e.to_string()))?;
    let mut edges = Vec::with_capacity(pairs.len());
    for (i, j) in pairs {
        let relative = truth.blocks()[i].transpose().compose(&truth.blocks()[j])?;
        let theta: f64 = noise.sample(&mut rng);
        let perturbation = if d == 2 {
            rotation2(theta)
        } else {
            let axis = loop {
                let v = Vector3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                if v.norm() > 1e-12 {
                    break v;
                }
            };
            manifold::rotation_from_axis_angle(&axis, theta)?
        };
        let measured = relative.compose(&perturbation)?;
        edges.push(Measurement {
            i,
            j,
            rotation: encodable(&measured),
            kappa: spec.kappa,
        });
    }
    Ok((MeasurementGraph::new(n, d, edges)?, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Haar-distributed blocks on SO(p).
    HaarSop,
    /// Random SO(3) blocks with uniform axis and angle in (−π, π), lifted to SO(p).
    UniformAnglesSo3Lifted,
}

impl std::str::FromStr for InitMode {
    type Err = crate::error::ShonanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "haar_sop" => Ok(Self::HaarSop),
            "uniform_angles_so3_lifted" => Ok(Self::UniformAnglesSo3Lifted),
            other => Err(invalid(format!("unknown init mode '{other}'"))),
        }
    }
}

pub fn random_init(n: usize, p: usize, mode: InitMode, seed: u64) -> Result<LiftedAssignment> {
    if n == 0 || p < 2 {
        return Err(invalid(format!(
            "random_init needs n >= 1 and p >= 2, got n = {n}, p = {p}"
        )));
    }
    let mut rng = init_rng(seed);
    let blocks = match mode {
        InitMode::HaarSop => (0..n).map(|_| random_rotation(p, &mut rng)).collect(),
        InitMode::UniformAnglesSo3Lifted => {
            if p < 3 {
                return Err(invalid("uniform_angles_so3_lifted needs p >= 3"));
            }
            (0..n)
                .map(|_| {
                    let axis = Vector3::new(
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    );
                    let angle = rng.random_range(-PI..PI);
                    let mut r =
                        manifold::rotation_from_axis_angle(&axis, angle).unwrap_or_else(|_| Rotation::identity(3));
                    while r.dim() < p {
                        r = lift_rotation(&r);
                    }
                    r
                })
                .collect()
        }
    };
    LiftedAssignment::new(blocks)
}

/// Per-node angular errors after the best global alignment `G` (Procrustes:
/// `G = nearest_rotation(Σ R_i R̂_iᵀ)`, so `R_i ≈ G R̂_i`).
pub fn aligned_errors(estimate: &RotationAssignment, truth: &RotationAssignment) -> Result<Vec<f64>> {
    if estimate.n() != truth.n() || estimate.d() != truth.d() {
        return Err(invalid("estimate and truth have different shapes"));
    }
    let d = truth.d();
    let mut m = DMatrix::zeros(d, d);
    for (r, e) in truth.blocks().iter().zip(estimate.blocks()) {
        m += r.matrix() * e.matrix().transpose();
    }
    let g = manifold::nearest_rotation(&m)?.rotation;
    truth
        .blocks()
        .iter()
        .zip(estimate.blocks())
        .map(|(r, e)| manifold::angular_distance(r, &g.compose(e)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_connection_laplacian, cost};

    #[test]
    fn noiseless_instance_has_zero_cost() {
        for d in [2, 3] {
            let spec = SyntheticSpec {
                d,
                ..SyntheticSpec::cycle(12, 0.0, 3)
            }
            .with_chords(4);
            let (g, truth) = generate_synthetic(&spec).unwrap();
            assert_eq!(g.num_edges(), 16);
            let l = build_connection_laplacian(&g);
            assert!(cost(&l, &truth).unwrap().abs() < 1e-20);
        }
    }

    #[test]
    fn cycle_edge_count_and_determinism() {
        let (g, _) = generate_synthetic(&SyntheticSpec::cycle(20, 0.2, 7)).unwrap();
        assert_eq!(g.n(), 20);
        assert_eq!(g.num_edges(), 20);
        let (h, _) = generate_synthetic(&SyntheticSpec::cycle(20, 0.2, 7)).unwrap();
        assert_eq!(g, h);
        let (k, _) = generate_synthetic(&SyntheticSpec::cycle(20, 0.2, 8)).unwrap();
        assert_ne!(g, k);
    }

    #[test]
    fn noise_statistics() {
        let sigma = 0.2;
        let spec = SyntheticSpec::cycle(10_000, sigma, 11);
        let (g, truth) = generate_synthetic(&spec).unwrap();
        let sum_sq: f64 = g
            .edges()
            .iter()
            .map(|e| {
                let rel = truth.blocks()[e.i].transpose().compose(&truth.blocks()[e.j]).unwrap();
                manifold::angular_distance(&rel, &e.rotation).unwrap().powi(2)
            })
            .sum();
        let std = (sum_sq / g.num_edges() as f64).sqrt();
        assert!((std - sigma).abs() < 0.02 * sigma, "{std}");
    }

    #[test]
    fn init_modes() {
        let a = random_init(10, 5, InitMode::HaarSop, 4).unwrap();
        let b = random_init(10, 5, InitMode::HaarSop, 4).unwrap();
        assert_eq!(a, b);
        let u = random_init(10, 3, InitMode::UniformAnglesSo3Lifted, 4).unwrap();
        for r in u.blocks() {
            assert_eq!(r.dim(), 3);
            assert!(manifold::orthonormality_error(r.matrix()) < 1e-10);
        }
        let lifted = random_init(10, 6, InitMode::UniformAnglesSo3Lifted, 4).unwrap();
        for r in lifted.blocks() {
            assert_eq!(r.matrix()[(5, 5)], 1.0);
        }
        let many = random_init(1000, 5, InitMode::HaarSop, 9).unwrap();
        for r in many.blocks() {
            assert!(Rotation::from_matrix(r.matrix().clone()).is_ok());
        }
    }

    #[test]
    fn seed_isolation() {
        // Drawing inits does not touch the graph stream.
        let spec = SyntheticSpec::cycle(15, 0.3, 5);
        let (g1, _) = generate_synthetic(&spec).unwrap();
        let _ = random_init(15, 5, InitMode::HaarSop, 5).unwrap();
        let (g2, _) = generate_synthetic(&spec).unwrap();
        assert_eq!(g1, g2);
        let a = graph_rng(5).random::<u64>();
        let b = init_rng(5).random::<u64>();
        assert_ne!(a, b);
    }

    #[test]
    fn alignment_removes_gauge() {
        let (_, truth) = generate_synthetic(&SyntheticSpec::cycle(8, 0.0, 1)).unwrap();
        let g = random_rotation(3, &mut ChaCha8Rng::seed_from_u64(2));
        let rotated = RotationAssignment::new(truth.blocks().iter().map(|r| g.compose(r).unwrap()).collect()).unwrap();
        let errors = aligned_errors(&rotated, &truth).unwrap();
        assert!(errors.iter().all(|&e| e < 1e-7));
    }
}
