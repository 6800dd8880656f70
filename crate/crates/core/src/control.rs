//! Exact controllability of `i z' = Lambda z + u(t) B z` on the sphere.
//!
//! The pipeline follows the constructive route: the resonant control space
//! and its moment problem invert the linearization around the reference
//! trajectory `e_1 e^{-i lambda_1 t}`; a Newton-chord iteration on top of it
//! gives local exact steering in unit time; a Lyapunov feedback followed by
//! free drift brings any state close to a chosen point of the circle
//! `{e_1 e^{it}}`; time reversal glues two such approaches to a local bridge.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    resonant_eval, run_control, ControlBasis, ControlSignal, Integrator, PropagatorConfig, TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::linalg::{self, conj, dist_to_circle, distance, inner, Cvec, Pair, SpectralData};
use crate::noise::{self, trig, NoiseModel};
use crate::quadrature::Rule;
use crate::system::{SystemSpec, DEFAULT_TOL_COUPLING, DEFAULT_TOL_GAP};

/// Largest accepted condition number of the moment system.
pub const MAX_CONDITION: f64 = 1e12;

/// `E_n`: real functions `sum_{|k| < n} d_k e^{i mu_k t}` with
/// `mu_k = lambda_{k+1} - lambda_1` and `d_{-k} = conj(d_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResonantSpace {
    mu: Vec<f64>,
}

impl ResonantSpace {
    pub fn new(spectral: &SpectralData) -> Result<Self> {
        let gap = spectral.min_gap();
        if gap < DEFAULT_TOL_GAP {
            return Err(Error::DegenerateSpectrum { gap });
        }
        let l1 = spectral.eigenvalues[0];
        Ok(Self { mu: spectral.eigenvalues[1..].iter().map(|l| l - l1).collect() })
    }

    /// Number of state dimensions `n`.
    pub fn n(&self) -> usize {
        self.mu.len() + 1
    }

    pub fn real_dim(&self) -> usize {
        2 * self.n() - 1
    }

    /// `mu_1, ..., mu_{n-1}`.
    pub fn frequencies(&self) -> &[f64] {
        &self.mu
    }

    /// `mu_k` for `k` in `-(n-1)..=(n-1)`.
    pub fn mu(&self, k: isize) -> f64 {
        match k {
            0 => 0.0,
            k if k > 0 => self.mu[k as usize - 1],
            k => -self.mu[(-k) as usize - 1],
        }
    }

    pub fn eval(&self, alpha: &[f64], t: f64) -> f64 {
        resonant_eval(&self.mu, alpha, t)
    }

    /// `sum_{|k| < n} d_k e^{i mu_k t}` from `d_0, ..., d_{n-1}`, with the
    /// negative modes filled in by conjugation.
    pub fn eval_complex(&self, d: &[C64], t: f64) -> C64 {
        let mut v = d[0];
        for (k, dk) in d.iter().enumerate().skip(1) {
            let m = self.mu[k - 1];
            v += dk * C64::from_polar(1.0, m * t) + dk.conj() * C64::from_polar(1.0, -m * t);
        }
        v
    }

    /// Complex coefficients `d_0..d_{n-1}` of a real coefficient vector.
    pub fn to_complex(&self, alpha: &[f64]) -> Vec<C64> {
        let mut d = vec![C64::new(alpha[0], 0.0)];
        for k in 0..self.mu.len() {
            d.push(C64::new(alpha[1 + 2 * k], -alpha[2 + 2 * k]) * 0.5);
        }
        d
    }

    /// Inverse of [`to_complex`](Self::to_complex); `Im d_0` is dropped.
    pub fn from_complex(&self, d: &[C64]) -> Vec<f64> {
        let mut alpha = vec![d[0].re];
        for dk in &d[1..] {
            alpha.push(2.0 * dk.re);
            alpha.push(-2.0 * dk.im);
        }
        alpha
    }

    /// Quadrature able to resolve products of two members.
    pub fn rule(&self) -> Rule {
        let mu_max = self.mu.iter().fold(0.0f64, |a, m| a.max(m.abs()));
        Rule::for_bandwidth(2.0 * mu_max + 16.0)
    }

    /// `int_0^1 e^{i mu_{k-1} s} w(s) ds` for `k = 1..n`.
    pub fn moments(&self, w: &dyn Fn(f64) -> f64) -> Vec<C64> {
        let rule = self.rule();
        let mut out = vec![C64::new(0.0, 0.0); self.n()];
        for (&s, &wt) in rule.nodes.iter().zip(&rule.weights) {
            let ws = w(s) * wt;
            out[0] += ws;
            for (k, m) in self.mu.iter().enumerate() {
                out[k + 1] += C64::from_polar(ws, m * s);
            }
        }
        out
    }

    fn basis_fn(&self, idx: usize, t: f64) -> f64 {
        if idx == 0 {
            return 1.0;
        }
        let k = (idx - 1) / 2;
        if idx % 2 == 1 {
            (self.mu[k] * t).cos()
        } else {
            (self.mu[k] * t).sin()
        }
    }

    pub fn control(&self, alpha: Vec<f64>) -> ControlSignal {
        ControlSignal::resonant(self.mu.clone(), alpha)
    }
}

/// Targets `c_k = int_0^1 e^{i mu_{k-1} s} w(s) ds`, `k = 1..n`; `c_1` is real.
#[derive(Debug, Clone)]
pub struct MomentProblem {
    space: ResonantSpace,
    targets: Vec<C64>,
}

impl MomentProblem {
    pub fn new(space: ResonantSpace, mut targets: Vec<C64>) -> Result<Self> {
        if targets.len() != space.n() {
            return Err(Error::DimensionMismatch { expected: space.n(), got: targets.len() });
        }
        let scale = targets.iter().map(|c| c.norm()).fold(1.0, f64::max);
        if targets[0].im.abs() > 1e-12 * scale {
            return Err(Error::InvalidArgument(format!("first moment must be real, Im = {:.3e}", targets[0].im)));
        }
        targets[0].im = 0.0;
        Ok(Self { space, targets })
    }

    pub fn space(&self) -> &ResonantSpace {
        &self.space
    }

    pub fn targets(&self) -> &[C64] {
        &self.targets
    }
}

/// Real-form coefficients of the unique `w` in `E_n` with the prescribed
/// moments, from the Gram system of `{1, cos mu_k s, sin mu_k s}`.
pub fn moment_solve(problem: &MomentProblem) -> Result<Vec<f64>> {
    let space = &problem.space;
    let dim = space.real_dim();
    let rule = space.rule();
    let mut g = DMatrix::<f64>::zeros(dim, dim);
    let mut vals = vec![0.0; dim];
    for (&s, &wt) in rule.nodes.iter().zip(&rule.weights) {
        for (i, v) in vals.iter_mut().enumerate() {
            *v = space.basis_fn(i, s);
        }
        for i in 0..dim {
            for j in i..dim {
                g[(i, j)] += wt * vals[i] * vals[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            g[(i, j)] = g[(j, i)];
        }
    }
    let mut rhs = DVector::<f64>::zeros(dim);
    rhs[0] = problem.targets[0].re;
    for (k, c) in problem.targets.iter().enumerate().skip(1) {
        rhs[2 * k - 1] = c.re;
        rhs[2 * k] = c.im;
    }
    if rhs.iter().all(|&x| x == 0.0) {
        return Ok(vec![0.0; dim]);
    }
    let svd = g.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(Error::IllConditioned { condition });
    }
    let sol = g.lu().solve(&rhs).ok_or(Error::IllConditioned { condition: f64::INFINITY })?;
    Ok(sol.iter().copied().collect())
}

/// Largest `|int e^{i mu_{k-1} s} w(s) ds - c_k|`.
pub fn moment_residual(problem: &MomentProblem, alpha: &[f64]) -> f64 {
    let space = &problem.space;
    space
        .moments(&|s| space.eval(alpha, s))
        .iter()
        .zip(&problem.targets)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max)
}

fn project_tangent(v: &Cvec, at: &Cvec) -> Cvec {
    v - at * C64::new(inner(v, at).re, 0.0)
}

/// `w` in `E_n` steering the linearized flow from `y0` (tangent at `e_1`) to
/// `y1_target` (tangent at `e_1 e^{-i lambda_1}`).
pub fn linearized_control(spec: &SystemSpec, y0: &Cvec, y1_target: &Cvec) -> Result<Vec<f64>> {
    let sd = spec.spectral();
    let space = ResonantSpace::new(sd)?;
    let e1 = spec.e1();
    let anchor = e1 * C64::from_polar(1.0, -sd.eigenvalues[0]);
    for (v, at) in [(y0, e1), (y1_target, &anchor)] {
        let re = inner(v, at).re;
        if re.abs() > 1e-10 {
            return Err(Error::TangencyViolated { re });
        }
    }
    let y0 = project_tangent(y0, e1);
    let y1 = project_tangent(y1_target, &anchor);
    let couplings = spec.couplings();
    let mut c = Vec::with_capacity(space.n());
    for (k, b1k) in couplings.iter().enumerate() {
        if b1k.norm() < DEFAULT_TOL_COUPLING {
            return Err(Error::DegenerateCoupling { index: k + 1, value: b1k.norm() });
        }
        let ek = sd.e(k);
        let num = inner(&y1, ek) * C64::from_polar(1.0, sd.eigenvalues[k]) - inner(&y0, ek);
        c.push(num / (C64::new(0.0, -1.0) * b1k));
    }
    moment_solve(&MomentProblem::new(space, c)?)
}

/// Moment targets `c_k` of [`linearized_control`], exposed for diagnostics.
pub fn linearized_targets(spec: &SystemSpec, y0: &Cvec, y1: &Cvec) -> Vec<C64> {
    let sd = spec.spectral();
    spec.couplings()
        .iter()
        .enumerate()
        .map(|(k, b1k)| {
            let ek = sd.e(k);
            (inner(y1, ek) * C64::from_polar(1.0, sd.eigenvalues[k]) - inner(y0, ek)) / (C64::new(0.0, -1.0) * b1k)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSteerConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Both endpoints must lie within this distance of their anchors.
    pub basin: f64,
    /// Once the residual ratio of two chord steps exceeds this value the
    /// iteration switches to Newton steps with a refreshed Jacobian.
    pub refresh_ratio: f64,
    pub propagator: PropagatorConfig,
}

impl Default for LocalSteerConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 20, basin: 0.05, refresh_ratio: 0.25, propagator: PropagatorConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalSteerResult {
    pub alpha: Vec<f64>,
    pub control: ControlSignal,
    pub residual: f64,
    pub iterations: usize,
    pub l2_norm: f64,
}

/// Unit-time control in `E_n` with `R_1(z_i, u) = z_f`, by a Newton-chord
/// iteration frozen at the anchor pair `(e_1, 0)`, falling back to full
/// Newton steps when the chord contracts too slowly.
pub fn local_steer(spec: &SystemSpec, z_i: &Cvec, z_f: &Cvec, cfg: &LocalSteerConfig) -> Result<LocalSteerResult> {
    let sd = spec.spectral();
    let space = ResonantSpace::new(sd)?;
    let e1 = spec.e1();
    let anchor = e1 * C64::from_polar(1.0, -sd.eigenvalues[0]);
    for (z, a) in [(z_i, e1), (z_f, &anchor)] {
        let d = distance(z, a);
        if d > cfg.basin {
            return Err(Error::OutsideBasin { distance: d, radius: cfg.basin });
        }
    }
    newton_chord(spec, &space, z_i, z_f, vec![0.0; space.real_dim()], cfg)
}

fn newton_chord(
    spec: &SystemSpec,
    space: &ResonantSpace,
    z_i: &Cvec,
    z_f: &Cvec,
    mut alpha: Vec<f64>,
    cfg: &LocalSteerConfig,
) -> Result<LocalSteerResult> {
    let anchor = spec.e1() * C64::from_polar(1.0, -spec.spectral().eigenvalues[0]);
    let zero = Cvec::zeros(spec.dim());
    let mut iterations = 0;
    let mut newton = false;
    let mut control = space.control(alpha.clone());
    let mut r = z_f - run_control(spec, z_i, &control, &cfg.propagator)?;
    let mut residual = linalg::norm(&r);
    loop {
        log::trace!("local_steer iteration {iterations}: residual {residual:.3e}");
        if residual <= cfg.tol {
            let l2_norm = control.segment_l2(0);
            return Ok(LocalSteerResult { alpha, control, residual, iterations, l2_norm });
        }
        if iterations >= cfg.max_iter || !residual.is_finite() {
            return Err(Error::NoConvergence { residual, iterations });
        }
        let step = if newton {
            newton_step(spec, space, z_i, &alpha, &r, &cfg.propagator)?
        } else {
            linearized_control(spec, &zero, &project_tangent(&r, &anchor))?
        };
        // backtrack until the residual decreases
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let trial: Vec<f64> = alpha.iter().zip(&step).map(|(a, d)| a + scale * d).collect();
            let c = space.control(trial.clone());
            let rt = z_f - run_control(spec, z_i, &c, &cfg.propagator)?;
            let res_t = linalg::norm(&rt);
            if res_t < residual {
                accepted = Some((trial, c, rt, res_t));
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((a, c, rt, res_t)) => {
                if !newton && res_t > cfg.refresh_ratio * residual {
                    newton = true;
                }
                alpha = a;
                control = c;
                r = rt;
                residual = res_t;
            }
            None if !newton => newton = true,
            None => return Err(Error::NoConvergence { residual, iterations }),
        }
    }
}

/// Least-squares step from the central-difference Jacobian of
/// `alpha -> R_1(z_i, alpha)` at the current coefficients.
fn newton_step(
    spec: &SystemSpec,
    space: &ResonantSpace,
    z_i: &Cvec,
    alpha: &[f64],
    r: &Cvec,
    config: &PropagatorConfig,
) -> Result<Vec<f64>> {
    let n = spec.dim();
    let dim = space.real_dim();
    let h = 1e-5;
    let mut jac = DMatrix::<f64>::zeros(2 * n, dim);
    for j in 0..dim {
        let mut plus = alpha.to_vec();
        let mut minus = alpha.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let d = (run_control(spec, z_i, &space.control(plus), config)?
            - run_control(spec, z_i, &space.control(minus), config)?)
            / C64::new(2.0 * h, 0.0);
        for i in 0..n {
            jac[(2 * i, j)] = d[i].re;
            jac[(2 * i + 1, j)] = d[i].im;
        }
    }
    let rhs = DVector::from_iterator(2 * n, r.iter().flat_map(|c| [c.re, c.im]));
    let sol = jac
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::InvalidArgument(format!("Newton step: {e}")))?;
    Ok(sol.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackConfig {
    pub gain: f64,
    pub target_radius: f64,
    pub max_time: f64,
    pub stall_threshold: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self { gain: 0.05, target_radius: 0.025, max_time: 400.0, stall_threshold: 1e-2 }
    }
}

/// `u(z) = c Im(<B z, e_1> <e_1, z>)`.
pub fn feedback_law(spec: &SystemSpec, gain: f64, z: &Cvec) -> f64 {
    let e1 = spec.e1();
    gain * (inner(&spec.b().apply(z), e1) * inner(e1, z)).im
}

#[derive(Debug, Clone)]
pub struct FeedbackOutcome {
    pub record: TrajectoryRecord,
    /// Applied control at every substep midpoint.
    pub controls: Vec<f64>,
    /// `(t, dist_to_circle)` at integer times.
    pub checkpoints: Vec<(f64, f64)>,
    pub monotone: bool,
}

/// Closed-loop feedback over one unit interval. Returns the midpoint values
/// of the applied control.
fn feedback_unit(integ: &Integrator<'_>, spec: &SystemSpec, gain: f64, z: &mut Cvec, t0: f64, drift: &mut f64) -> Result<Vec<f64>> {
    let steps = integ.config().substeps_per_unit;
    let h = 1.0 / steps as f64;
    let r0 = linalg::norm(z);
    let mut samples = Vec::with_capacity(steps);
    for s in 0..steps {
        // predictor for the midpoint state
        let u0 = feedback_law(spec, gain, z);
        let mut half = z.clone();
        integ.linear(&mut half, u0, 0.5 * h);
        let u = feedback_law(spec, gain, &half);
        integ.substep(z, u, h, r0, t0 + (s + 1) as f64 * h, drift)?;
        samples.push(u);
    }
    Ok(samples)
}

/// Integrate the closed loop until `dist_to_circle <= target_radius` at an
/// integer time.
pub fn feedback_drive(spec: &SystemSpec, z0: &Cvec, fb: &FeedbackConfig, config: &PropagatorConfig) -> Result<FeedbackOutcome> {
    let e1 = spec.e1();
    let overlap = inner(z0, e1).norm();
    if overlap < fb.stall_threshold {
        return Err(Error::StallDetected { overlap, threshold: fb.stall_threshold });
    }
    let integ = Integrator::new(spec, *config)?;
    let mut z = z0.clone();
    let mut drift = 0.0;
    let mut controls = Vec::new();
    let mut rec = TrajectoryRecord {
        times: vec![0.0],
        states: vec![z0.clone()],
        drifts: vec![0.0],
        max_norm_drift: 0.0,
        drive_label: format!("feedback(c={})", fb.gain),
    };
    let mut dist = dist_to_circle(&z, e1);
    let mut checkpoints = vec![(0.0, dist)];
    let mut monotone = true;
    let mut t = 0.0;
    while dist > fb.target_radius {
        if t >= fb.max_time {
            return Err(Error::Timeout { max_time: fb.max_time, distance: dist });
        }
        controls.extend(feedback_unit(&integ, spec, fb.gain, &mut z, t, &mut drift)?);
        t += 1.0;
        let next = dist_to_circle(&z, e1);
        if next > dist + 1e-12 {
            monotone = false;
            log::debug!("feedback: distance rose from {dist:.6e} to {next:.6e} at t = {t}");
        }
        dist = next;
        checkpoints.push((t, dist));
        rec.times.push(t);
        rec.states.push(z.clone());
        rec.drifts.push(drift);
    }
    rec.max_norm_drift = drift;
    Ok(FeedbackOutcome { record: rec, controls, checkpoints, monotone })
}

/// Smallest `k <= k_max` with `||e^{-i Lambda k} z - e_1 e^{is}|| <= delta`.
pub fn phase_align(spec: &SystemSpec, z: &Cvec, s: f64, delta: f64, k_max: usize) -> Result<usize> {
    let sd = spec.spectral();
    let e1 = spec.e1();
    let dist = dist_to_circle(z, e1);
    if dist > 0.5 * delta + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "phase_align needs dist_to_circle <= delta/2, got {dist:.3e} > {:.3e}",
            0.5 * delta
        )));
    }
    let c = sd.coordinates(z);
    let off: f64 = c[1..].iter().map(|x| x.norm_sqr()).sum();
    let target = C64::from_polar(1.0, s);
    for k in 0..=k_max {
        let c1 = c[0] * C64::from_polar(1.0, -sd.eigenvalues[0] * k as f64);
        if (off + (c1 - target).norm_sqr()).sqrt() <= delta {
            return Ok(k);
        }
    }
    Err(Error::AlignmentExhausted { k_max, suggested_gamma: 1e-3 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproachConfig {
    pub feedback: FeedbackConfig,
    /// Controls are projected onto `span{g_1..g_N}` per unit interval.
    pub span_modes: usize,
    /// Bound on `||u_j||_{L^2}` per unit interval.
    pub nu: f64,
    pub k_max: usize,
    pub retries: usize,
    /// Seed for the random noise kicks that leave the stall set.
    pub seed: u64,
    pub propagator: PropagatorConfig,
}

impl Default for ApproachConfig {
    fn default() -> Self {
        Self {
            feedback: FeedbackConfig::default(),
            span_modes: 8,
            nu: 1.0,
            k_max: 10_000,
            retries: 5,
            seed: 0,
            propagator: PropagatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStage {
    pub label: String,
    pub control: ControlSignal,
}

impl PlanStage {
    pub fn duration(&self) -> usize {
        self.control.duration()
    }
}

/// A concatenated open-loop control with its predicted stage endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    pub start: Cvec,
    pub target: Cvec,
    pub stages: Vec<PlanStage>,
    /// Endpoint of every stage.
    pub endpoints: Vec<Cvec>,
    /// `||endpoint - target||` of the full replay.
    pub total_error: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl SteeringPlan {
    fn empty(start: Cvec, target: Cvec) -> Self {
        let total_error = distance(&start, &target);
        Self { start, target, stages: Vec::new(), endpoints: Vec::new(), total_error, diagnostics: BTreeMap::new() }
    }

    pub fn duration(&self) -> usize {
        self.stages.iter().map(PlanStage::duration).sum()
    }

    pub fn endpoint(&self) -> &Cvec {
        self.endpoints.last().unwrap_or(&self.start)
    }

    /// Replay every stage from `start`; returns the stage endpoints.
    pub fn replay(&self, spec: &SystemSpec, config: &PropagatorConfig) -> Result<Vec<Cvec>> {
        let mut z = self.start.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            z = run_control(spec, &z, &stage.control, config)?;
            out.push(z.clone());
        }
        Ok(out)
    }

    /// Replay and refresh `endpoints` and `total_error`.
    pub fn verify(&mut self, spec: &SystemSpec, config: &PropagatorConfig) -> Result<f64> {
        self.endpoints = self.replay(spec, config)?;
        self.total_error = distance(self.endpoint(), &self.target);
        Ok(self.total_error)
    }

    /// Stage endpoints chain: replaying stage `i` from endpoint `i - 1`
    /// reproduces endpoint `i` within `tol`.
    pub fn check_chain(&self, spec: &SystemSpec, config: &PropagatorConfig, tol: f64) -> Result<bool> {
        let mut prev = self.start.clone();
        for (stage, end) in self.stages.iter().zip(&self.endpoints) {
            if stage.duration() == 0 {
                return Ok(false);
            }
            let z = run_control(spec, &prev, &stage.control, config)?;
            if distance(&z, end) > tol {
                return Ok(false);
            }
            prev = end.clone();
        }
        Ok(self.stages.len() == self.endpoints.len())
    }

    pub fn to_doc(&self) -> PlanDoc {
        PlanDoc {
            start: linalg::to_pairs(&self.start),
            target: linalg::to_pairs(&self.target),
            stages: self
                .stages
                .iter()
                .map(|s| StageDoc { label: s.label.clone(), duration: s.duration(), control: s.control.clone() })
                .collect(),
            endpoints: self.endpoints.iter().map(linalg::to_pairs).collect(),
            total_error: self.total_error,
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn from_doc(doc: &PlanDoc) -> Result<Self> {
        for s in &doc.stages {
            if s.duration != s.control.duration() {
                return Err(Error::InvalidArgument(format!(
                    "stage '{}' declares duration {} but has {} segments",
                    s.label,
                    s.duration,
                    s.control.duration()
                )));
            }
        }
        Ok(Self {
            start: linalg::from_pair_vec(&doc.start),
            target: linalg::from_pair_vec(&doc.target),
            stages: doc.stages.iter().map(|s| PlanStage { label: s.label.clone(), control: s.control.clone() }).collect(),
            endpoints: doc.endpoints.iter().map(|e| linalg::from_pair_vec(e)).collect(),
            total_error: doc.total_error,
            diagnostics: doc.diagnostics.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlanDoc {
    pub start: Vec<Pair>,
    pub target: Vec<Pair>,
    pub stages: Vec<StageDoc>,
    pub endpoints: Vec<Vec<Pair>>,
    pub total_error: f64,
    #[serde(default)]
    pub diagnostics: BTreeMap<String, f64>,
}

/// One stage on disk: `label`, `duration`, `basis` (with `mu` for resonant
/// controls) and per-unit `segments` of coefficients.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageDoc {
    pub label: String,
    pub duration: usize,
    #[serde(flatten)]
    pub control: ControlSignal,
}

/// Projected closed-loop feedback: each unit interval runs the feedback, the
/// applied control is projected onto `span{g_1..g_N}` (clipped to norm
/// `nu`) and the unit is re-integrated open loop with the projection.
fn projected_feedback(
    spec: &SystemSpec,
    z0: &Cvec,
    cfg: &ApproachConfig,
) -> Result<(ControlSignal, Cvec, bool)> {
    let fb = &cfg.feedback;
    let e1 = spec.e1();
    let integ = Integrator::new(spec, cfg.propagator)?;
    let steps = cfg.propagator.substeps_per_unit;
    let n_modes = cfg.span_modes.min(steps / 2 - 1).max(1);
    // g_j at substep midpoints; the midpoint rule is exact for these modes
    let table: Vec<Vec<f64>> = (1..=n_modes)
        .map(|j| (0..steps).map(|s| trig(j, (s as f64 + 0.5) / steps as f64)).collect())
        .collect();
    let mut z = z0.clone();
    let mut drift = 0.0;
    let mut dist = dist_to_circle(&z, e1);
    let mut segments = Vec::new();
    let mut monotone = true;
    let mut t = 0.0;
    while dist > fb.target_radius {
        if t >= fb.max_time {
            return Err(Error::Timeout { max_time: fb.max_time, distance: dist });
        }
        let mut probe = z.clone();
        let samples = feedback_unit(&integ, spec, fb.gain, &mut probe, t, &mut drift)?;
        let mut coeffs: Vec<f64> = table
            .iter()
            .map(|g| g.iter().zip(&samples).map(|(a, b)| a * b).sum::<f64>() / steps as f64)
            .collect();
        let l2 = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
        if l2 > cfg.nu {
            coeffs.iter_mut().for_each(|c| *c *= cfg.nu / l2);
        }
        let seg = ControlSignal::trig(vec![coeffs]);
        z = run_control(spec, &z, &seg, &cfg.propagator)?;
        segments.push(seg.segments.into_iter().next().expect("one segment"));
        t += 1.0;
        let next = dist_to_circle(&z, e1);
        if next > dist + 1e-12 {
            monotone = false;
        }
        dist = next;
    }
    Ok((ControlSignal::trig(segments), z, monotone))
}

/// Plan from `z0` into `S ∩ B(e_1 e^{is}, delta)`: projected feedback down to
/// `dist_to_circle <= target_radius`, then free drift to align the phase.
/// States in the stall set `<z, e_1> = 0` are kicked by one random noise
/// segment first.
pub fn approach(spec: &SystemSpec, z0: &Cvec, s: f64, delta: f64, cfg: &ApproachConfig) -> Result<SteeringPlan> {
    let e1 = spec.e1().clone();
    let target = &e1 * C64::from_polar(1.0, s);
    let mut plan = SteeringPlan::empty(z0.clone(), target.clone());
    if distance(z0, &target) <= delta {
        return Ok(plan);
    }
    let mut fb = cfg.feedback;
    fb.target_radius = fb.target_radius.min(0.5 * delta);
    let cfg = ApproachConfig { feedback: fb, ..*cfg };
    let kick_model = NoiseModel::power_law(cfg.span_modes.max(1));
    let mut z = z0.clone();
    let mut attempt = 0u64;
    let (feedback, z_fb, monotone) = loop {
        let overlap = inner(&z, &e1).norm();
        let outcome = if overlap < fb.stall_threshold {
            Err(Error::StallDetected { overlap, threshold: fb.stall_threshold })
        } else {
            projected_feedback(spec, &z, &cfg)
        };
        match outcome {
            Ok(v) => break v,
            Err(e @ Error::StallDetected { .. }) => {
                if attempt as usize >= cfg.retries {
                    return Err(Error::ApproachFailed { retries: cfg.retries, last: e.to_string() });
                }
                let seg = noise::sample_segment(&kick_model, &mut noise::segment_rng(cfg.seed, 0x5747, attempt));
                let kick = ControlSignal::from_noise(&seg, &kick_model);
                z = run_control(spec, &z, &kick, &cfg.propagator)?;
                plan.stages.push(PlanStage { label: "kick".into(), control: kick });
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    };
    if !feedback.segments.is_empty() {
        plan.stages.push(PlanStage { label: "feedback".into(), control: feedback });
    }
    let k = phase_align(spec, &z_fb, s, delta, cfg.k_max)?;
    if k > 0 {
        plan.stages.push(PlanStage { label: "drift".into(), control: ControlSignal::zero(k) });
    }
    let err = plan.verify(spec, &cfg.propagator)?;
    plan.diagnostics.insert("feedback_monotone".into(), if monotone { 1.0 } else { 0.0 });
    plan.diagnostics.insert("kicks".into(), attempt as f64);
    plan.diagnostics.insert("drift_steps".into(), k as f64);
    if err > delta * (1.0 + 1e-9) {
        return Err(Error::ApproachFailed {
            retries: attempt as usize,
            last: format!("replayed endpoint misses the ball: {err:.3e} > {delta:.3e}"),
        });
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalSteerConfig {
    pub approach: ApproachConfig,
    pub local: LocalSteerConfig,
    /// Both approaches land within `min(delta, bridge_radius)` of their
    /// anchors before the unit-time bridge is attempted.
    pub bridge_radius: f64,
}

impl Default for GlobalSteerConfig {
    fn default() -> Self {
        Self {
            approach: ApproachConfig::default(),
            local: LocalSteerConfig { tol: 1e-10, ..Default::default() },
            bridge_radius: 0.005,
        }
    }
}

/// Exact steering `z1 -> z2`: approach `B(e_1, delta)` from `z1`, approach
/// `B(e_1 e^{i lambda_1}, delta)` from `conj(z2)` and reverse that control in
/// time, and bridge the two balls in unit time with [`local_steer`].
pub fn global_steer(
    spec: &SystemSpec,
    z1: &Cvec,
    z2: &Cvec,
    delta: f64,
    tol: f64,
    cfg: &GlobalSteerConfig,
) -> Result<SteeringPlan> {
    if !spec.is_real() {
        return Err(Error::NonRealSystem);
    }
    if spec.is_nonlinear() {
        return Err(Error::InvalidArgument("exact steering is built at eps = 0".into()));
    }
    for z in [z1, z2] {
        if !linalg::is_on_sphere(z) {
            return Err(Error::InvalidArgument("endpoints must lie on the unit sphere".into()));
        }
    }
    let l1 = spec.spectral().eigenvalues[0];
    let prop = cfg.approach.propagator;
    let land = delta.min(cfg.bridge_radius);
    let a_plan = approach(spec, z1, 0.0, land, &cfg.approach)?;
    let a = a_plan.endpoint().clone();
    let c_cfg = ApproachConfig { seed: noise::derive_seed(cfg.approach.seed, 1), ..cfg.approach };
    let c_plan = approach(spec, &conj(z2), l1, land, &c_cfg)?;
    let y = conj(c_plan.endpoint());
    let mut local = cfg.local;
    local.basin = local.basin.max(delta);
    local.tol = local.tol.min(0.1 * tol);
    local.propagator = prop;
    let bridge = local_steer(spec, &a, &y, &local).map_err(|e| Error::BridgeFailed(e.to_string()))?;

    let mut reversed = Vec::new();
    for stage in c_plan.stages.iter().rev() {
        reversed.push(PlanStage { label: format!("reversed-{}", stage.label), control: stage.control.reversed() });
    }
    // reversal identity on the constructed piece
    let mut back = y.clone();
    for st in &reversed {
        back = run_control(spec, &back, &st.control, &prop)?;
    }
    let reversal_error = distance(&back, z2);

    let mut plan = SteeringPlan::empty(z1.clone(), z2.clone());
    plan.stages.extend(a_plan.stages.iter().map(|s| PlanStage { label: format!("approach-{}", s.label), ..s.clone() }));
    plan.stages.push(PlanStage { label: "bridge".into(), control: bridge.control.clone() });
    plan.stages.extend(reversed);
    let err = plan.verify(spec, &prop)?;
    plan.diagnostics.insert("reversal_error".into(), reversal_error);
    plan.diagnostics.insert("bridge_residual".into(), bridge.residual);
    plan.diagnostics.insert("bridge_iterations".into(), bridge.iterations as f64);
    plan.diagnostics.insert("bridge_l2".into(), bridge.l2_norm);
    plan.diagnostics.insert("approach_duration".into(), a_plan.duration() as f64);
    plan.diagnostics.insert("return_duration".into(), c_plan.duration() as f64);
    if err > tol {
        return Err(Error::ToleranceNotMet { error: err, tolerance: tol });
    }
    Ok(plan)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RobustEntry {
    pub epsilon: f64,
    /// `||R^eps(z, u) - R^0(z, u)||`
    pub drift: f64,
    pub distance_to_target: f64,
    pub within_delta: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RobustReport {
    pub delta: f64,
    pub plan_error: f64,
    pub entries: Vec<RobustEntry>,
    /// Drift decreases strictly as `eps` decreases along the sweep.
    pub monotone: bool,
}

impl RobustReport {
    pub fn drift_at(&self, eps: f64) -> Option<f64> {
        self.entries.iter().find(|e| e.epsilon == eps).map(|e| e.drift)
    }
}

/// Replays a plan built at `eps = 0` under each `eps` in the sweep, using
/// the nonlinearity of `spec`.
pub fn robust_check(
    spec: &SystemSpec,
    plan: &SteeringPlan,
    delta: f64,
    sweep: &[f64],
    config: &PropagatorConfig,
) -> Result<RobustReport> {
    let linear = spec.with_epsilon(0.0);
    let reference = plan.replay(&linear, config)?;
    let ref_end = reference.last().cloned().unwrap_or_else(|| plan.start.clone());
    let plan_error = distance(&ref_end, &plan.target);
    let mut entries = Vec::with_capacity(sweep.len());
    for &eps in sweep {
        let end = if eps == 0.0 {
            ref_end.clone()
        } else {
            plan.replay(&spec.with_epsilon(eps), config)?.last().cloned().unwrap_or_else(|| plan.start.clone())
        };
        let d = distance(&end, &plan.target);
        entries.push(RobustEntry {
            epsilon: eps,
            drift: distance(&end, &ref_end),
            distance_to_target: d,
            within_delta: d <= delta,
        });
    }
    let mut by_eps: Vec<&RobustEntry> = entries.iter().filter(|e| e.epsilon != 0.0).collect();
    by_eps.sort_by(|a, b| a.epsilon.abs().total_cmp(&b.epsilon.abs()));
    let monotone = by_eps.windows(2).all(|w| w[0].drift < w[1].drift);
    Ok(RobustReport { delta, plan_error, entries, monotone })
}

/// Basis label of a control, as written to plan files.
pub fn basis_name(c: &ControlSignal) -> &'static str {
    match c.basis {
        ControlBasis::Trig => "trig",
        ControlBasis::Resonant { .. } => "resonant",
    }
}
