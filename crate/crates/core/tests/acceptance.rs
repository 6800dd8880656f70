//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report is always
//! printed. The process fails when a criterion outside `KNOWN_FAILURES`
//! fails; the known failures still print FAIL with their measurements.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use qsphere_core::control::{
    self, GlobalSteerConfig, LocalSteerConfig, MomentProblem, ResonantSpace, SteeringPlan,
};
use qsphere_core::dynamics::{propagate, run_control, ControlSignal, NoisePath, PropagatorConfig};
use qsphere_core::ergodicity::{self, InitialLaw};
use qsphere_core::galerkin::{self, PolynomialPotential};
use qsphere_core::linalg::{basis_vector, conj, distance, norm, random_sphere_point, Cmat};
use qsphere_core::noise::{self, NoiseModel};
use qsphere_core::system::Nonlinearity;
use qsphere_core::{sys_a, sys_b, Cvec, Error, HermitianMatrix, SystemSpec, C64};

/// Criteria measured to fail at the pinned sizes; see the README.
const KNOWN_FAILURES: [usize; 4] = [4, 6, 8, 10];

struct Outcome {
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> HermitianMatrix {
    let mut m = Cmat::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = C64::new(rng.sample(StandardNormal), 0.0);
        for j in i + 1..n {
            let c = C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            m[(i, j)] = c;
            m[(j, i)] = c.conj();
        }
    }
    HermitianMatrix::new(m).unwrap()
}

fn random_spec(n: usize, rng: &mut ChaCha8Rng) -> SystemSpec {
    let eps = if rng.random_bool(0.5) { rng.random_range(0.0..0.1) } else { 0.0 };
    let nl = if eps > 0.0 { Nonlinearity::galerkin_power(n, 2.0) } else { Nonlinearity::None };
    SystemSpec::new(random_hermitian(n, rng), random_hermitian(n, rng), eps, nl).unwrap()
}

fn anchor(spec: &SystemSpec) -> Cvec {
    spec.e1() * C64::from_polar(1.0, -spec.spectral().eigenvalues[0])
}

fn c1_unitarity() -> Outcome {
    let mut r = rng(1001);
    let cfg = PropagatorConfig::default();
    let mut guard: f64 = 0.0;
    let mut end: f64 = 0.0;
    let mut errors = 0;
    for case in 0..100 {
        let n = 2 + case % 2;
        let spec = random_spec(n, &mut r);
        let model = NoiseModel::power_law(r.random_range(1..=8));
        let z0 = random_sphere_point(n, &mut r);
        let path = [noise::sample_segment(&model, &mut r)];
        match propagate(&spec, &z0, &NoisePath { path: &path, model: &model }, 1.0, &cfg) {
            Ok(rec) => {
                // largest per-substep drift seen before the norm is restored
                guard = guard.max(rec.max_norm_drift);
                end = end.max((norm(rec.endpoint()) - 1.0).abs());
            }
            Err(_) => errors += 1,
        }
    }
    Outcome {
        pass: errors == 0 && guard <= 1e-9 && end <= 1e-9,
        detail: format!(
            "endpoint |norm - 1| max {end:.2e}, per-substep drift max {guard:.2e}, {errors} drift errors (tol 1e-9)"
        ),
    }
}

fn c2_integrator_order() -> Outcome {
    let spec = sys_b().with_epsilon(0.1);
    let model = NoiseModel::default();
    let path = [noise::sample_segment(&model, &mut rng(2002))];
    let drive = NoisePath { path: &path, model: &model };
    let z0 = random_sphere_point(3, &mut rng(2003));
    let end = |substeps: usize| {
        let cfg = PropagatorConfig::default().with_substeps(substeps);
        propagate(&spec, &z0, &drive, 1.0, &cfg).unwrap().endpoint().clone()
    };
    let reference = end(4096);
    let hs = [32usize, 64, 128, 256];
    let pts: Vec<(f64, f64)> = hs
        .iter()
        .map(|&m| ((1.0 / m as f64).ln(), distance(&end(m), &reference).ln()))
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    Outcome {
        pass: (slope - 2.0).abs() <= 0.2,
        detail: format!("log-log slope {slope:.3} over substeps {hs:?} (need 2.0 +- 0.2)"),
    }
}

fn c3_moment_solver() -> Outcome {
    let systems = [sys_a(), sys_b(), galerkin::build(&PolynomialPotential::monomial(2), 4, 2.0, 0.0).unwrap().spec];
    let mut r = rng(3003);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let spec = &systems[i % 3];
        let space = ResonantSpace::new(spec.spectral()).unwrap();
        let n = spec.dim();
        let mut c: Vec<C64> = (0..n).map(|_| C64::new(r.sample(StandardNormal), r.sample(StandardNormal))).collect();
        c[0].im = 0.0;
        let problem = MomentProblem::new(space, c).unwrap();
        let alpha = control::moment_solve(&problem).unwrap();
        worst = worst.max(control::moment_residual(&problem, &alpha));
    }
    Outcome { pass: worst <= 1e-10, detail: format!("max quadrature residual {worst:.2e} over 1000 targets, n in 2..=4") }
}

fn c4_local_steering() -> Outcome {
    let systems = [("SYS-A", sys_a()), ("Galerkin n=3", sys_b())];
    let cfg = LocalSteerConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, (name, spec)) in systems.iter().enumerate() {
        let mut r = rng(4004 + k as u64);
        let a = anchor(spec);
        let mut ok = 0;
        let mut worst_iter = 0;
        for _ in 0..50 {
            let zi = ergodicity::sample_in_ball(spec.e1(), 0.02, &mut r);
            let zf = ergodicity::sample_in_ball(&a, 0.02, &mut r);
            if let Ok(res) = control::local_steer(spec, &zi, &zf, &cfg) {
                if res.residual <= 1e-8 && res.iterations <= 20 {
                    ok += 1;
                    worst_iter = worst_iter.max(res.iterations);
                }
            }
        }
        pass &= ok == 50;
        parts.push(format!("{name} {ok}/50 (max {worst_iter} iterations)"));
    }
    Outcome { pass, detail: parts.join(", ") }
}

fn steering_plans() -> Vec<Result<SteeringPlan, Error>> {
    let spec = sys_a();
    let mut r = rng(5005);
    let cfg = GlobalSteerConfig::default();
    (0..20)
        .map(|_| {
            let z1 = random_sphere_point(2, &mut r);
            let z2 = random_sphere_point(2, &mut r);
            control::global_steer(&spec, &z1, &z2, 0.03, 1e-6, &cfg)
        })
        .collect()
}

fn c5_global_steering(plans: &[Result<SteeringPlan, Error>]) -> Outcome {
    let spec = sys_a();
    let pc = PropagatorConfig::default();
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    let mut loud = true;
    for p in plans {
        match p {
            Ok(plan) => {
                let ends = plan.replay(&spec, &pc).unwrap();
                let e = distance(ends.last().unwrap(), &plan.target);
                worst = worst.max(e);
                if e <= 1e-6 {
                    ok += 1;
                }
            }
            Err(Error::AlignmentExhausted { .. }) => {}
            Err(_) => loud = false,
        }
    }
    Outcome {
        pass: ok >= 18 && loud,
        detail: format!("{ok}/20 replayed within 1e-6 (worst {worst:.2e}); other failures AlignmentExhausted: {loud}"),
    }
}

fn c6_robustness(plans: &[Result<SteeringPlan, Error>]) -> Outcome {
    let nl = sys_a().with_nonlinearity(Nonlinearity::galerkin_power(2, 2.0)).unwrap();
    let pc = PropagatorConfig::default();
    let mut within = 0;
    let mut monotone = 0;
    let mut built = 0;
    let mut drifts = Vec::new();
    for plan in plans.iter().flatten() {
        built += 1;
        let rep = control::robust_check(&nl, plan, 0.05, &[1e-1, 1e-2, 1e-3], &pc).unwrap();
        if rep.entries[2].within_delta {
            within += 1;
        }
        if rep.monotone {
            monotone += 1;
        }
        drifts.push(rep.entries[2].drift);
    }
    drifts.sort_by(f64::total_cmp);
    let median = drifts.get(drifts.len() / 2).copied().unwrap_or(f64::NAN);
    Outcome {
        pass: within >= 18 && monotone == built,
        detail: format!(
            "{within}/20 within 0.05 at eps=1e-3 (median drift {median:.3}), monotone drift in {monotone}/{built} plans"
        ),
    }
}

struct Shared {
    spec: SystemSpec,
    model: NoiseModel,
    cfg: PropagatorConfig,
    partition: ergodicity::Partition,
}

fn shared() -> Shared {
    let spec = sys_a();
    let model = NoiseModel::default();
    let cfg = PropagatorConfig::default();
    let partition = ergodicity::make_partition(&spec, &model, 64, 10_000, 7007, &cfg).unwrap();
    Shared { spec, model, cfg, partition }
}

fn c7_mixing(s: &Shared) -> Outcome {
    assert_eq!(s.model.nondegenerate_prefix(), 8);
    let (a, b) = (InitialLaw::Point(basis_vector(2, 0)), InitialLaw::Point(basis_vector(2, 1)));
    match ergodicity::mixing_experiment(&s.spec, &s.model, &a, &b, 30, 20_000, &s.partition, 7, &s.cfg) {
        Ok(r) => {
            let tv30 = r.tv_at(30).unwrap();
            Outcome {
                pass: r.rate > 0.0 && r.rate_ci.0 > 0.0 && tv30 < 2.0 * r.noise_floor,
                detail: format!(
                    "rate {:.4} (95% CI {:.4}..{:.4}), TV_30 {:.4} vs 2 x floor {:.4}",
                    r.rate,
                    r.rate_ci.0,
                    r.rate_ci.1,
                    tv30,
                    2.0 * r.noise_floor
                ),
            }
        }
        Err(e) => Outcome { pass: false, detail: format!("fit failed: {e}") },
    }
}

fn c8_hitting(s: &Shared) -> Outcome {
    let z0 = s.spec.spectral().e(1).clone();
    let r = ergodicity::hitting_experiment(&s.spec, &s.model, &z0, 0.3, 0.05, 500, 5000, 9, &s.cfg).unwrap();
    let fit = r.tail_fit;
    let neg = fit.is_some_and(|f| f.slope_ci.1 < 0.0);
    Outcome {
        pass: r.censored_fraction() < 0.05 && neg,
        detail: format!(
            "censored {:.2}% (need < 5%), tail slope {} , mean tau {:.1}",
            100.0 * r.censored_fraction(),
            fit.map_or("none".into(), |f| format!("{:.2e} (95% CI {:.2e}..{:.2e})", f.slope, f.slope_ci.0, f.slope_ci.1)),
            r.mean_tau
        ),
    }
}

fn c9_contraction(s: &Shared) -> Outcome {
    let deltas = [0.3, 0.2, 0.1, 0.05];
    let reports: Vec<_> = deltas
        .iter()
        .map(|&d| ergodicity::contraction_probe(&s.spec, &s.model, d, &s.partition, 10_000, 10, 3, &s.cfg).unwrap())
        .collect();
    let p: Vec<f64> = reports.iter().map(|r| r.p_hat).collect();
    let at_01 = p[2];
    let decreasing = p.windows(2).all(|w| w[1] < w[0]);
    Outcome {
        pass: at_01 <= 0.9 && decreasing,
        detail: format!(
            "worst TV - floor at 0.1: {at_01:.3}; by delta0 {deltas:?}: {:?}; floor {:.3}",
            p.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            reports[2].noise_floor
        ),
    }
}

fn c10_coupling(s: &Shared) -> Outcome {
    let r = ergodicity::coupling_experiment(&s.spec, &s.model, 0.2, &s.partition, 10_000, 500, 200, 5, &s.cfg).unwrap();
    let met = r.met_by(200);
    let slope = r.survival_fit.map(|f| f.slope);
    Outcome {
        pass: met >= 0.95 && r.absorbing_all && slope.is_some_and(|s| s < 0.0),
        detail: format!(
            "met by 200: {:.1}%, absorbing in all: {}, survival slope {}",
            100.0 * met,
            r.absorbing_all,
            slope.map_or("none".into(), |s| format!("{s:.3e}"))
        ),
    }
}

fn c11_galerkin() -> Outcome {
    let v = PolynomialPotential::monomial(2);
    let e11 = galerkin::matrix_element(&v, 1, 1);
    let e12 = galerkin::matrix_element(&v, 1, 2);
    let d11 = (e11 - (1.0 / 3.0 - 1.0 / (2.0 * PI * PI))).abs();
    let d12 = (e12 + 16.0 / (9.0 * PI * PI)).abs();
    let check = galerkin::condition_check(&v, 5).unwrap().condition.pass;
    Outcome {
        pass: d11 <= 1e-10 && d12 <= 1e-10 && check,
        detail: format!("|V11 error| {d11:.1e}, |V12 error| {d12:.1e}, condition n=5 passes: {check}"),
    }
}

fn c12_time_reversal() -> Outcome {
    let systems = [sys_a(), sys_b()];
    let pc = PropagatorConfig::default();
    let mut r = rng(1212);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let spec = &systems[i % 2];
        let z0 = random_sphere_point(spec.dim(), &mut r);
        let k = r.random_range(1..=3);
        let u = ControlSignal::trig((0..k).map(|_| (0..8).map(|_| r.random_range(-1.0..1.0)).collect()).collect());
        let zt = run_control(spec, &z0, &u, &pc).unwrap();
        let back = run_control(spec, &conj(&zt), &u.reversed(), &pc).unwrap();
        worst = worst.max(distance(&conj(&back), &z0));
    }
    Outcome { pass: worst <= 1e-8, detail: format!("max |conj(R(conj z_T, u_rev)) - z0| = {worst:.2e} over 50 cases") }
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, Duration, Duration)> = Vec::new();
    let mut run = |id: usize, name: &'static str, budget: u64, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let mut o = f();
        let el = t.elapsed();
        let budget = Duration::from_secs(budget);
        if el > budget {
            o.pass = false;
            o.detail.push_str(&format!("; over the {}s budget", budget.as_secs()));
        }
        println!(
            "criterion {id:2} {name:<22} {} {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            el.as_secs_f64()
        );
        results.push((id, name, o, el, budget));
    };
    run(1, "unitarity", 10, &mut c1_unitarity);
    run(2, "integrator order", 30, &mut c2_integrator_order);
    run(3, "moment solver", 10, &mut c3_moment_solver);
    run(4, "local steering", 120, &mut c4_local_steering);
    let mut plans = Vec::new();
    run(5, "global steering", 600, &mut || {
        plans = steering_plans();
        c5_global_steering(&plans)
    });
    run(6, "robustness", 300, &mut || c6_robustness(&plans));
    let s = shared();
    run(7, "mixing", 600, &mut || c7_mixing(&s));
    run(8, "hitting time", 300, &mut || c8_hitting(&s));
    run(9, "kernel contraction", 600, &mut || c9_contraction(&s));
    run(10, "coupled chain", 600, &mut || c10_coupling(&s));
    run(11, "galerkin oracles", 1, &mut c11_galerkin);
    run(12, "time reversal", 30, &mut c12_time_reversal);

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    let unexpected: Vec<usize> =
        results.iter().filter(|r| !r.2.pass && !KNOWN_FAILURES.contains(&r.0)).map(|r| r.0).collect();
    let fixed: Vec<usize> = results.iter().filter(|r| r.2.pass && KNOWN_FAILURES.contains(&r.0)).map(|r| r.0).collect();
    if !fixed.is_empty() {
        println!("acceptance: listed as known failures but passing: {fixed:?}");
    }
    if !unexpected.is_empty() {
        println!("acceptance: unexpected failures {unexpected:?}");
        std::process::exit(1);
    }
}
