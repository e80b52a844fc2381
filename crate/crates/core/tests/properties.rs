use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shonan::certifier::build_certificate;
use shonan::io::{format_g2o, generate_synthetic, parse_g2o_str, random_init, InitMode, KappaPolicy, SyntheticSpec};
use shonan::local_solver::{lm_optimize, GaugeMode, SolverConfig};
use shonan::manifold::{
    hat, lift_stiefel_to_rotation, nearest_rotation, orthonormality_error, project_to_stiefel, random_rotation,
    retract, tangent_dim, vee, TangentCoords,
};
use shonan::problem::{build_connection_laplacian, cost, edge_cost_lifted, LiftedAssignment};
use shonan::staircase::{round_solution_detailed, shonan_averaging, Method};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tangent(p: usize, scale: f64, r: &mut ChaCha8Rng) -> TangentCoords {
    let v: Vec<f64> = (0..tangent_dim(p)).map(|_| r.random_range(-scale..scale)).collect();
    TangentCoords::from_slice(p, &v).unwrap()
}

fn small_problem(seed: u64, n: usize, sigma: f64) -> shonan::problem::MeasurementGraph {
    let free = n * (n - 1) / 2 - n;
    let chords = (seed as usize) % (free.min(n) + 1);
    generate_synthetic(&SyntheticSpec::cycle(n, sigma, seed).with_chords(chords))
        .unwrap()
        .0
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn vee_inverts_hat(p in 2usize..=8, seed: u64) {
        let v = tangent(p, 3.0, &mut rng(seed));
        let back = vee(&hat(&v)).unwrap();
        prop_assert!((back.coords() - v.coords()).norm() <= 1e-15 * v.norm().max(1.0));
    }

    #[test]
    fn retraction_stays_on_so_p(p in 2usize..=8, seed: u64, scale in 0.0f64..10.0) {
        let mut r = rng(seed);
        let q = random_rotation(p, &mut r);
        let out = retract(&q, &tangent(p, scale, &mut r)).unwrap();
        prop_assert!(orthonormality_error(out.matrix()) < 1e-10);
        prop_assert!((out.matrix().determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lifting_a_stiefel_point_projects_back(d in 2usize..=3, extra in 1usize..=4, seed: u64) {
        let p = d + extra;
        let q = random_rotation(p, &mut rng(seed));
        let s = project_to_stiefel(&q, d).unwrap();
        let lifted = lift_stiefel_to_rotation(&s).unwrap();
        let back = project_to_stiefel(&lifted, d).unwrap();
        prop_assert!((back.matrix() - s.matrix()).norm() < 1e-12);
        prop_assert!((lifted.matrix().determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn nearest_rotation_maximizes_alignment(d in 2usize..=4, seed: u64) {
        let mut r = rng(seed);
        let m = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
        let best = nearest_rotation(&m).unwrap().rotation;
        let score = |x: &DMatrix<f64>| (x.transpose() * &m).trace();
        let top = score(best.matrix());
        for _ in 0..50 {
            let other = random_rotation(d, &mut r);
            prop_assert!(score(other.matrix()) <= top + 1e-12);
        }
    }

    #[test]
    fn cost_is_nonnegative_and_gauge_invariant(seed: u64, n in 3usize..25, p in 3usize..=6) {
        let g = small_problem(seed, n, 0.4);
        let l = build_connection_laplacian(&g);
        let q = random_init(n, p, InitMode::HaarSop, seed).unwrap();
        let f = cost(&l, &q.project(3).unwrap()).unwrap();
        prop_assert!(f >= -1e-12);
        let turn = random_rotation(p, &mut rng(seed ^ 1));
        let moved = q.left_multiply(&turn).unwrap();
        let f_moved = cost(&l, &moved.project(3).unwrap()).unwrap();
        prop_assert!((f - f_moved).abs() <= 1e-12 * f.max(1.0));
        prop_assert!((edge_cost_lifted(&g, &q) - f).abs() <= 1e-10 * f.max(1.0));
    }

    #[test]
    fn laplacian_and_certificate_share_the_edge_pattern(seed: u64, n in 3usize..30) {
        let g = small_problem(seed, n, 0.3);
        let l = build_connection_laplacian(&g);
        prop_assert_eq!(l.matrix().block_pattern().len(), n + 2 * g.num_edges());
        let s = random_init(n, 5, InitMode::HaarSop, seed).unwrap().project(3).unwrap();
        let c = build_certificate(&l, &s).unwrap();
        prop_assert_eq!(c.matrix().block_pattern(), l.matrix().block_pattern());
    }

    #[test]
    fn rounding_keeps_a_determinant_majority(seed: u64, n in 2usize..40, extra in 0usize..4) {
        let s = random_init(n, 3 + extra, InitMode::HaarSop, seed).unwrap().project(3).unwrap();
        let out = round_solution_detailed(&s).unwrap();
        prop_assert!(out.positive_after_vote >= n.div_ceil(2));
        for b in out.rotations.blocks() {
            prop_assert!(orthonormality_error(b.matrix()) < 1e-10);
            prop_assert!(b.matrix().determinant() > 0.0);
        }
    }

    #[test]
    fn g2o_roundtrip_is_field_exact(seed: u64, n in 2usize..30, sigma in 0.0f64..1.5, d in 2usize..=3) {
        let spec = SyntheticSpec { d, ..SyntheticSpec::cycle(n, sigma, seed) };
        let (g, truth) = generate_synthetic(&spec).unwrap();
        let parsed = parse_g2o_str(&format_g2o(&g, Some(&truth)).unwrap(), KappaPolicy::Unit).unwrap();
        prop_assert_eq!(parsed.graph, g);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn lm_descends_monotonically_on_the_manifold(seed: u64, n in 5usize..40, p in 3usize..=5, horizontal: bool) {
        let g = small_problem(seed, n, 0.5);
        let q0 = random_init(n, p, InitMode::HaarSop, seed).unwrap();
        let cfg = SolverConfig {
            gauge_mode: if horizontal { GaugeMode::Horizontal } else { GaugeMode::Damped },
            ..SolverConfig::default()
        };
        let out = lm_optimize(&g, &q0, &cfg, None).unwrap();
        for w in out.cost_history.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        for b in out.assignment.blocks() {
            prop_assert!(orthonormality_error(b.matrix()) < 1e-9);
        }
        let again = lm_optimize(&g, &q0, &cfg, None).unwrap();
        prop_assert_eq!(again.cost_history, out.cost_history);
    }

    #[test]
    fn staircase_accounting(seed: u64, n in 8usize..60) {
        let g = small_problem(seed, n, 0.5);
        let cfg = Method::Sl.config();
        let q0 = random_init(n, cfg.p_min, InitMode::HaarSop, seed).unwrap();
        let r = shonan_averaging(&g, &q0, &cfg).unwrap();
        prop_assert_eq!(r.p_final - r.p_min, r.escapes.len());
        for e in &r.escapes {
            prop_assert!(e.cost_after < e.cost_before);
        }
        let mut previous = f64::INFINITY;
        for level in &r.levels {
            prop_assert!(level.cost < previous);
            previous = level.cost;
        }
        if let (true, Some(f_sdp)) = (r.certified, r.f_sdp) {
            prop_assert!(r.f_hat >= f_sdp - 1e-9 * f_sdp.abs().max(1.0));
            if r.exact == Some(true) {
                prop_assert!(r.f_hat - f_sdp <= 1e-6 * f_sdp.abs().max(1.0));
            }
        }
    }

    #[test]
    fn init_seed_never_changes_the_problem(seed: u64, other: u64, n in 3usize..30) {
        let a = small_problem(seed, n, 0.3);
        let _ = random_init(n, 4, InitMode::HaarSop, other).unwrap();
        let b = small_problem(seed, n, 0.3);
        prop_assert_eq!(a, b);
        let lifted = LiftedAssignment::from_rotations(
            &generate_synthetic(&SyntheticSpec::cycle(n, 0.0, seed)).unwrap().1,
            4,
        )
        .unwrap();
        prop_assert!(edge_cost_lifted(&small_problem(seed, n, 0.0), &lifted) < 1e-20);
    }
}
