use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qsphere_core::control::{self, MomentProblem, ResonantSpace};
use qsphere_core::dynamics::{linearized_flow, run_control, ControlSignal, PropagatorConfig};
use qsphere_core::ergodicity::{self, EmpiricalMeasure, Partition};
use qsphere_core::galerkin::PolynomialPotential;
use qsphere_core::linalg::{conj, distance, inner, norm, random_sphere_point};
use qsphere_core::noise::{self, NoiseModel};
use qsphere_core::{sys_a, sys_b, Cvec, SystemSpec, C64};

fn partition(m: usize, seed: u64) -> Partition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Partition::new((0..m).map(|_| random_sphere_point(2, &mut rng)).collect()).unwrap()
}

fn measure(p: &Partition, counts: &[usize]) -> EmpiricalMeasure {
    let mut c = counts.to_vec();
    if c.iter().all(|&x| x == 0) {
        c[0] = 1;
    }
    EmpiricalMeasure::from_counts(p, &c).unwrap()
}

fn state(n: usize, seed: u64) -> Cvec {
    random_sphere_point(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn spec(which: bool) -> SystemSpec {
    if which {
        sys_a()
    } else {
        sys_b()
    }
}

fn cfg() -> PropagatorConfig {
    PropagatorConfig::default().with_substeps(64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tv_is_a_metric(
        a in prop::collection::vec(0usize..50, 6),
        b in prop::collection::vec(0usize..50, 6),
        c in prop::collection::vec(0usize..50, 6),
    ) {
        let p = partition(6, 1);
        let (ma, mb, mc) = (measure(&p, &a), measure(&p, &b), measure(&p, &c));
        let ab = ergodicity::tv_distance(&ma, &mb).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ergodicity::tv_distance(&mb, &ma).unwrap()).abs() < 1e-15);
        prop_assert_eq!(ergodicity::tv_distance(&ma, &ma).unwrap(), 0.0);
        let ac = ergodicity::tv_distance(&ma, &mc).unwrap();
        let cb = ergodicity::tv_distance(&mc, &mb).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
    }

    #[test]
    fn maximal_coupling_marginals_meet_at_one_minus_tv(
        a in prop::collection::vec(0usize..20, 4),
        b in prop::collection::vec(0usize..20, 4),
        seed in 0u64..1000,
    ) {
        let part = partition(4, 2);
        let (p, q) = (measure(&part, &a), measure(&part, &b));
        let tv = ergodicity::tv_distance(&p, &q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4000;
        let mut same = 0;
        for _ in 0..n {
            let (x, y, coupled) = ergodicity::maximal_coupling_sample(&p, &q, &mut rng).unwrap();
            prop_assert_eq!(coupled, x == y);
            same += usize::from(coupled);
        }
        let f = same as f64 / n as f64;
        // four standard errors of a binomial proportion
        let se = ((1.0 - tv) * tv / n as f64).sqrt().max(1.0 / n as f64);
        prop_assert!((f - (1.0 - tv)).abs() <= 4.0 * se + 1e-12, "{} vs {}", f, 1.0 - tv);
    }

    #[test]
    fn assignment_picks_a_nearest_centroid(seed in 0u64..10_000) {
        let p = partition(9, 3);
        let z = state(2, seed);
        let cell = p.assign(&z);
        let d = distance(&z, &p.centroids()[cell]);
        prop_assert!(p.centroids().iter().all(|c| d <= distance(&z, c) + 1e-15));
    }

    #[test]
    fn flow_preserves_the_norm(
        which in any::<bool>(),
        seed in 0u64..10_000,
        coeffs in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let s = spec(which);
        let z0 = state(s.dim(), seed);
        let u = ControlSignal::trig(vec![coeffs]);
        let z1 = run_control(&s, &z0, &u, &cfg()).unwrap();
        prop_assert!((norm(&z1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn real_systems_reverse_in_time(
        which in any::<bool>(),
        seed in 0u64..10_000,
        coeffs in prop::collection::vec(-2.0f64..2.0, 16),
    ) {
        let s = spec(which);
        let z0 = state(s.dim(), seed);
        let u = ControlSignal::trig(vec![coeffs[..8].to_vec(), coeffs[8..].to_vec()]);
        let zt = run_control(&s, &z0, &u, &cfg()).unwrap();
        let back = run_control(&s, &conj(&zt), &u.reversed(), &cfg()).unwrap();
        prop_assert!(distance(&conj(&back), &z0) < 1e-10);
    }

    #[test]
    fn phase_equivariance_of_the_linear_flow(
        seed in 0u64..10_000,
        theta in -3.2f64..3.2,
        coeffs in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let s = sys_b();
        let z0 = state(3, seed);
        let rot = C64::from_polar(1.0, theta);
        let u = ControlSignal::trig(vec![coeffs]);
        let a = run_control(&s, &z0, &u, &cfg()).unwrap() * rot;
        let b = run_control(&s, &(&z0 * rot), &u, &cfg()).unwrap();
        prop_assert!(distance(&a, &b) < 1e-12);
    }

    #[test]
    fn moment_solutions_reproduce_targets(
        which in any::<bool>(),
        parts in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let s = spec(which);
        let n = s.dim();
        let mut c: Vec<C64> = (0..n).map(|k| C64::new(parts[2 * k], parts[2 * k + 1])).collect();
        c[0].im = 0.0;
        let problem = MomentProblem::new(ResonantSpace::new(s.spectral()).unwrap(), c).unwrap();
        let alpha = control::moment_solve(&problem).unwrap();
        prop_assert!(control::moment_residual(&problem, &alpha) < 1e-10);
    }

    #[test]
    fn linearized_control_reaches_the_target(
        seed in 0u64..10_000,
        scale in 0.01f64..1.0,
    ) {
        // the target tangent vector v at e_1 must satisfy Re <v, e_1> = 0
        let s = sys_a();
        let e1 = s.e1().clone();
        let mut v = state(2, seed) * C64::new(scale, 0.0);
        let re = inner(&v, &e1).re;
        v -= &e1 * C64::new(re, 0.0);
        let y1 = s.spectral().evolve(&v, 1.0);
        let zero = Cvec::zeros(2);
        let alpha = control::linearized_control(&s, &zero, &y1).unwrap();
        let space = ResonantSpace::new(s.spectral()).unwrap();
        let reached = linearized_flow(&s, &zero, &|t| space.eval(&alpha, t)).unwrap();
        prop_assert!(distance(&reached, &y1) < 1e-8);
    }

    #[test]
    fn segment_streams_are_reproducible(seed in any::<u64>(), traj in 0u64..100, seg in 0u64..100) {
        let m = NoiseModel::default();
        let a = noise::sample_segment(&m, &mut noise::segment_rng(seed, traj, seg));
        let b = noise::sample_segment(&m, &mut noise::segment_rng(seed, traj, seg));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn potentials_round_trip_through_text(coeffs in prop::collection::vec(-9i32..9, 1..5)) {
        let v = PolynomialPotential::new(coeffs.iter().map(|&c| f64::from(c)).collect());
        let back: PolynomialPotential = v.to_string().parse().unwrap();
        prop_assert_eq!(back, v);
    }
}

#[test]
fn system_documents_round_trip() {
    for s in [sys_a(), sys_b().with_epsilon(0.01)] {
        let back = SystemSpec::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), s.to_json().unwrap());
    }
    let m = NoiseModel::power_law(5);
    let back: NoiseModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back, m);
}
