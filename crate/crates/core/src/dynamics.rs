//! Norm-preserving integration of the driven system, the unit-time Markov
//! step and the Duhamel form of the linearization around `e_1 e^{-i lambda_1 t}`.
//!
//! Each substep of width `h` is a Strang splitting: half a step of
//! `z' = -i eps F(z)` by explicit midpoint, the exact unitary
//! `exp(-i h (Lambda + u B))` with `u` the drive at the substep midpoint, and
//! another nonlinear half step. The norm is restored after every substep and
//! the pre-restoration drift is tracked.

use std::io::Write;

use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, expm_apply, expm_apply_2x2, inner, Cmat, Cvec};
use crate::noise::{self, NoiseModel, NoiseSegment};
use crate::quadrature::Rule;
use crate::system::SystemSpec;

/// A real scalar drive `t -> u(t)`.
pub trait Drive {
    fn value(&self, t: f64) -> Result<f64>;

    fn label(&self) -> String {
        "drive".into()
    }
}

/// Infallible drive from a closure.
pub struct FnDrive<F>(pub F);

impl<F: Fn(f64) -> f64> Drive for FnDrive<F> {
    fn value(&self, t: f64) -> Result<f64> {
        Ok((self.0)(t))
    }

    fn label(&self) -> String {
        "function".into()
    }
}

pub struct ZeroDrive;

impl Drive for ZeroDrive {
    fn value(&self, _t: f64) -> Result<f64> {
        Ok(0.0)
    }

    fn label(&self) -> String {
        "zero".into()
    }
}

/// A sampled noise path read as `beta(t)`.
pub struct NoisePath<'a> {
    pub path: &'a [NoiseSegment],
    pub model: &'a NoiseModel,
}

impl Drive for NoisePath<'_> {
    fn value(&self, t: f64) -> Result<f64> {
        noise::beta_eval(self.path, self.model, t)
    }

    fn label(&self) -> String {
        format!("noise[{} segments]", self.path.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagatorConfig {
    pub substeps_per_unit: usize,
    pub norm_drift_tolerance: f64,
    /// Record every `record_stride` substeps; 0 keeps the endpoints only.
    pub record_stride: usize,
    /// Restore the initial norm after every substep.
    pub renormalize: bool,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        Self { substeps_per_unit: 256, norm_drift_tolerance: 1e-9, record_stride: 0, renormalize: true }
    }
}

impl PropagatorConfig {
    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps_per_unit = substeps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps_per_unit < 16 {
            return Err(Error::InvalidArgument(format!(
                "substeps_per_unit = {} < 16",
                self.substeps_per_unit
            )));
        }
        if self.norm_drift_tolerance.is_nan() || self.norm_drift_tolerance <= 0.0 {
            return Err(Error::InvalidArgument("norm drift tolerance must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<Cvec>,
    /// Running maximum of the pre-restoration relative norm drift.
    pub drifts: Vec<f64>,
    pub max_norm_drift: f64,
    pub drive_label: String,
}

impl TrajectoryRecord {
    pub fn endpoint(&self) -> &Cvec {
        self.states.last().expect("record holds at least the start")
    }

    /// Columns `t, re(z_1), im(z_1), ..., norm_drift`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.states.first().map_or(0, |z| z.len());
        write!(out, "t")?;
        for k in 1..=n {
            write!(out, ",re_z{k},im_z{k}")?;
        }
        writeln!(out, ",norm_drift")?;
        for ((t, z), d) in self.times.iter().zip(&self.states).zip(&self.drifts) {
            write!(out, "{t:.17e}")?;
            for c in z.iter() {
                write!(out, ",{:.17e},{:.17e}", c.re, c.im)?;
            }
            writeln!(out, ",{d:.6e}")?;
        }
        Ok(())
    }
}

/// Integration state shared by every driver of the splitting scheme.
pub(crate) struct Integrator<'a> {
    spec: &'a SystemSpec,
    config: PropagatorConfig,
    lam: Cmat,
    bm: Cmat,
    two_level: bool,
    nonlinear: bool,
}

impl<'a> Integrator<'a> {
    pub(crate) fn new(spec: &'a SystemSpec, config: PropagatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            spec,
            config,
            lam: spec.lambda().matrix().clone(),
            bm: spec.b().matrix().clone(),
            two_level: spec.dim() == 2,
            nonlinear: spec.is_nonlinear(),
        })
    }

    pub(crate) fn config(&self) -> &PropagatorConfig {
        &self.config
    }

    /// `exp(-i h (Lambda + u B)) z`.
    #[inline]
    pub(crate) fn linear(&self, z: &mut Cvec, u: f64, h: f64) {
        if self.two_level {
            let a = self.lam[(0, 0)].re + u * self.bm[(0, 0)].re;
            let b = self.lam[(0, 1)] + self.bm[(0, 1)] * u;
            let d = self.lam[(1, 1)].re + u * self.bm[(1, 1)].re;
            expm_apply_2x2(a, b, d, h, z.as_mut_slice());
        } else {
            let hm = &self.lam + &self.bm * C64::new(u, 0.0);
            *z = expm_apply(&hm, h, z);
        }
    }

    fn nonlinear_half(&self, z: &mut Cvec, tau: f64) {
        let coef = C64::new(0.0, -self.spec.epsilon());
        let f = self.spec.nonlinearity();
        let k1 = f.eval(z) * coef;
        let mid = &*z + k1 * C64::new(0.5 * tau, 0.0);
        let k2 = f.eval(&mid) * coef;
        *z += k2 * C64::new(tau, 0.0);
    }

    /// One full substep followed by the norm guard.
    #[inline]
    pub(crate) fn substep(&self, z: &mut Cvec, u: f64, h: f64, r0: f64, t: f64, drift: &mut f64) -> Result<()> {
        if self.nonlinear {
            self.nonlinear_half(z, 0.5 * h);
        }
        self.linear(z, u, h);
        if self.nonlinear {
            self.nonlinear_half(z, 0.5 * h);
        }
        self.guard(z, r0, t, drift)
    }

    pub(crate) fn guard(&self, z: &mut Cvec, r0: f64, t: f64, drift: &mut f64) -> Result<()> {
        let r = linalg::norm(z);
        let d = (r / r0 - 1.0).abs();
        if d.is_nan() || d > self.config.norm_drift_tolerance {
            return Err(Error::NormDriftExceeded { drift: d, tolerance: self.config.norm_drift_tolerance, t });
        }
        if d > *drift {
            *drift = d;
        }
        if self.config.renormalize && d > 0.0 {
            *z *= C64::new(r0 / r, 0.0);
        }
        Ok(())
    }

    /// Integrate over `samples.len()` substeps of width `h` with the given
    /// midpoint drive values.
    pub(crate) fn run_samples(&self, z: &mut Cvec, samples: &[f64], h: f64, t0: f64, r0: f64, drift: &mut f64) -> Result<()> {
        for (s, &u) in samples.iter().enumerate() {
            self.substep(z, u, h, r0, t0 + (s + 1) as f64 * h, drift)?;
        }
        Ok(())
    }
}

fn substep_count(t_final: f64, per_unit: usize) -> usize {
    let exact = t_final * per_unit as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() <= 1e-9 * exact.max(1.0) {
        (rounded as usize).max(1)
    } else {
        exact.ceil() as usize
    }
}

/// Integrate from `z0` over `[0, t_final]` under `drive`.
pub fn propagate(
    spec: &SystemSpec,
    z0: &Cvec,
    drive: &dyn Drive,
    t_final: f64,
    config: &PropagatorConfig,
) -> Result<TrajectoryRecord> {
    if z0.len() != spec.dim() {
        return Err(Error::DimensionMismatch { expected: spec.dim(), got: z0.len() });
    }
    if t_final.is_nan() || t_final <= 0.0 {
        return Err(Error::InvalidArgument(format!("propagation time must be > 0, got {t_final}")));
    }
    let integ = Integrator::new(spec, *config)?;
    let r0 = linalg::norm(z0);
    if r0 <= 1e-300 {
        return Err(Error::ZeroVector);
    }
    let steps = substep_count(t_final, config.substeps_per_unit);
    let h = t_final / steps as f64;
    let mut z = z0.clone();
    let mut drift = 0.0;
    let mut rec = TrajectoryRecord {
        times: vec![0.0],
        states: vec![z0.clone()],
        drifts: vec![0.0],
        max_norm_drift: 0.0,
        drive_label: drive.label(),
    };
    for s in 0..steps {
        let u = drive.value((s as f64 + 0.5) * h)?;
        let t = (s + 1) as f64 * h;
        integ.substep(&mut z, u, h, r0, t, &mut drift)?;
        let last = s + 1 == steps;
        if last || (config.record_stride > 0 && (s + 1) % config.record_stride == 0) {
            rec.times.push(if last { t_final } else { t });
            rec.states.push(z.clone());
            rec.drifts.push(drift);
        }
    }
    rec.max_norm_drift = drift;
    Ok(rec)
}

/// Endpoint of one unit interval under one noise segment.
pub fn propagate_unit(
    spec: &SystemSpec,
    z0: &Cvec,
    segment: &NoiseSegment,
    model: &NoiseModel,
    config: &PropagatorConfig,
) -> Result<Cvec> {
    MarkovStepper::new(spec, model, *config)?.advance(z0, segment)
}

/// Unit-time Markov step with a precomputed basis table.
pub struct MarkovStepper<'a> {
    integ: Integrator<'a>,
    model: &'a NoiseModel,
    table: Vec<f64>,
}

impl<'a> MarkovStepper<'a> {
    pub fn new(spec: &'a SystemSpec, model: &'a NoiseModel, config: PropagatorConfig) -> Result<Self> {
        let integ = Integrator::new(spec, config)?;
        let table = model.midpoint_table(config.substeps_per_unit);
        Ok(Self { integ, model, table })
    }

    pub fn model(&self) -> &NoiseModel {
        self.model
    }

    pub fn advance(&self, z0: &Cvec, segment: &NoiseSegment) -> Result<Cvec> {
        let mut z = z0.clone();
        self.advance_in_place(&mut z, segment)?;
        Ok(z)
    }

    pub fn advance_in_place(&self, z: &mut Cvec, segment: &NoiseSegment) -> Result<()> {
        let weights = self.model.weights(segment);
        let jn = weights.len();
        let steps = self.integ.config().substeps_per_unit;
        let h = 1.0 / steps as f64;
        let r0 = linalg::norm(z);
        if r0 <= 1e-300 {
            return Err(Error::ZeroVector);
        }
        let mut drift = 0.0;
        for (s, row) in self.table.chunks_exact(jn).enumerate() {
            let u: f64 = row.iter().zip(&weights).map(|(g, w)| g * w).sum();
            self.integ.substep(z, u, h, r0, (s + 1) as f64 * h, &mut drift)?;
        }
        Ok(())
    }

    /// Draw one segment and advance.
    pub fn step<R: Rng + ?Sized>(&self, z: &Cvec, rng: &mut R) -> Result<Cvec> {
        let seg = noise::sample_segment(self.model, rng);
        self.advance(z, &seg)
    }
}

/// One step of the Markov chain `z -> U_1(z)` with default integrator settings.
pub fn step_markov<R: Rng + ?Sized>(spec: &SystemSpec, z: &Cvec, model: &NoiseModel, rng: &mut R) -> Result<Cvec> {
    MarkovStepper::new(spec, model, PropagatorConfig::default())?.step(z, rng)
}

/// `y_1` of the linearization around `(e_1 e^{-i lambda_1 t}, 0)`:
/// `y_1 = e^{-i Lambda} y_0 - i int_0^1 e^{-i Lambda (1-s)} w(s) B e_1 e^{-i lambda_1 s} ds`.
pub fn linearized_flow(spec: &SystemSpec, y0: &Cvec, w: &dyn Fn(f64) -> f64) -> Result<Cvec> {
    if spec.is_nonlinear() {
        return Err(Error::InvalidArgument("linearized flow needs eps = 0".into()));
    }
    let e1 = spec.e1();
    let re = inner(y0, e1).re;
    if re.abs() > 1e-10 {
        return Err(Error::TangencyViolated { re });
    }
    let sd = spec.spectral();
    let lambda = &sd.eigenvalues;
    let l1 = lambda[0];
    let couplings = spec.couplings();
    let y0c = sd.coordinates(y0);
    let mu_max = lambda.iter().map(|l| (l - l1).abs()).fold(0.0, f64::max);
    let rule = Rule::for_bandwidth(2.0 * mu_max + 32.0);
    let n = spec.dim();
    let mut acc = vec![C64::new(0.0, 0.0); n];
    for (&s, &wt) in rule.nodes.iter().zip(&rule.weights) {
        let ws = w(s) * wt;
        for k in 0..n {
            acc[k] += C64::from_polar(ws, -lambda[k] * (1.0 - s) - l1 * s);
        }
    }
    let coords: Vec<C64> = (0..n)
        .map(|k| y0c[k] * C64::from_polar(1.0, -lambda[k]) - C64::i() * couplings[k] * acc[k])
        .collect();
    Ok(sd.from_coordinates(&coords))
}

/// Basis in which the per-unit-interval segments of a [`ControlSignal`] are
/// expressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "basis", rename_all = "snake_case")]
pub enum ControlBasis {
    /// Noise basis `g_1, g_2, ...`; coefficient `j - 1` multiplies `g_j`.
    Trig,
    /// Real resonant exponentials with frequencies `mu_1..mu_{n-1}`; layout
    /// `[a_0, a_c1, a_s1, ..., a_c(n-1), a_s(n-1)]` for
    /// `a_0 + sum_k a_ck cos(mu_k t) + a_sk sin(mu_k t)`.
    Resonant { mu: Vec<f64> },
}

pub fn resonant_eval(mu: &[f64], alpha: &[f64], t: f64) -> f64 {
    let mut v = alpha[0];
    for (k, m) in mu.iter().enumerate() {
        let (s, c) = (m * t).sin_cos();
        v += alpha[1 + 2 * k] * c + alpha[2 + 2 * k] * s;
    }
    v
}

/// Deterministic drive made of unit-interval segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    #[serde(flatten)]
    pub basis: ControlBasis,
    pub segments: Vec<Vec<f64>>,
}

impl ControlSignal {
    pub fn trig(segments: Vec<Vec<f64>>) -> Self {
        Self { basis: ControlBasis::Trig, segments }
    }

    /// `k` unit intervals of zero control.
    pub fn zero(k: usize) -> Self {
        Self::trig(vec![vec![0.0]; k])
    }

    pub fn resonant(mu: Vec<f64>, alpha: Vec<f64>) -> Self {
        Self { basis: ControlBasis::Resonant { mu }, segments: vec![alpha] }
    }

    /// The noise segment `eta = sum b_j xi_j g_j` as a control.
    pub fn from_noise(segment: &NoiseSegment, model: &NoiseModel) -> Self {
        Self::trig(vec![model.weights(segment)])
    }

    pub fn duration(&self) -> usize {
        self.segments.len()
    }

    pub fn segment_value(&self, k: usize, t: f64) -> f64 {
        let c = &self.segments[k];
        match &self.basis {
            ControlBasis::Trig => c.iter().enumerate().map(|(j, a)| a * noise::trig(j + 1, t)).sum(),
            ControlBasis::Resonant { mu } => resonant_eval(mu, c, t),
        }
    }

    /// `L^2([0, 1])` norm of segment `k`.
    pub fn segment_l2(&self, k: usize) -> f64 {
        match &self.basis {
            ControlBasis::Trig => self.segments[k].iter().map(|a| a * a).sum::<f64>().sqrt(),
            ControlBasis::Resonant { mu } => {
                let mu_max = mu.iter().fold(0.0f64, |a, m| a.max(m.abs()));
                Rule::for_bandwidth(2.0 * mu_max + 16.0)
                    .integrate(|t| self.segment_value(k, t).powi(2))
                    .sqrt()
            }
        }
    }

    /// Every segment lies in `span{g_1..g_N}` with `L^2` norm at most `nu`.
    pub fn satisfies_span(&self, n_modes: usize, nu: f64) -> bool {
        matches!(self.basis, ControlBasis::Trig)
            && (0..self.duration()).all(|k| {
                self.segments[k].iter().skip(n_modes).all(|&a| a == 0.0) && self.segment_l2(k) <= nu
            })
    }

    /// `u'(t) = u(T - t)`.
    pub fn reversed(&self) -> Self {
        let segments = self
            .segments
            .iter()
            .rev()
            .map(|c| match &self.basis {
                // g_{2m+1} is odd about t = 1/2, the rest are even
                ControlBasis::Trig => c
                    .iter()
                    .enumerate()
                    .map(|(j, a)| if j >= 2 && j % 2 == 0 { -a } else { *a })
                    .collect(),
                ControlBasis::Resonant { mu } => {
                    let mut r = vec![c[0]; c.len()];
                    for (k, m) in mu.iter().enumerate() {
                        let (s, co) = m.sin_cos();
                        let (ac, as_) = (c[1 + 2 * k], c[2 + 2 * k]);
                        r[1 + 2 * k] = ac * co + as_ * s;
                        r[2 + 2 * k] = ac * s - as_ * co;
                    }
                    r
                }
            })
            .collect();
        Self { basis: self.basis.clone(), segments }
    }

    /// Drive values at the substep midpoints of one segment.
    pub fn midpoint_samples(&self, k: usize, substeps: usize) -> Vec<f64> {
        (0..substeps)
            .map(|s| self.segment_value(k, (s as f64 + 0.5) / substeps as f64))
            .collect()
    }
}

impl Drive for ControlSignal {
    fn value(&self, t: f64) -> Result<f64> {
        let len = self.duration();
        if t < 0.0 || t > len as f64 || !t.is_finite() {
            return Err(Error::PathExhausted { t, segment: t.max(0.0).floor() as usize, len });
        }
        let k = (t.floor() as usize).min(len.saturating_sub(1));
        Ok(self.segment_value(k, t - k as f64))
    }

    fn label(&self) -> String {
        match self.basis {
            ControlBasis::Trig => format!("trig control [{} units]", self.duration()),
            ControlBasis::Resonant { .. } => format!("resonant control [{} units]", self.duration()),
        }
    }
}

/// Endpoint of `z0` under `control`, unit segment by unit segment.
pub fn run_control(spec: &SystemSpec, z0: &Cvec, control: &ControlSignal, config: &PropagatorConfig) -> Result<Cvec> {
    let integ = Integrator::new(spec, *config)?;
    let steps = config.substeps_per_unit;
    let h = 1.0 / steps as f64;
    let r0 = linalg::norm(z0);
    if r0 <= 1e-300 {
        return Err(Error::ZeroVector);
    }
    let mut z = z0.clone();
    let mut drift = 0.0;
    for k in 0..control.duration() {
        let samples = control.midpoint_samples(k, steps);
        integ.run_samples(&mut z, &samples, h, k as f64, r0, &mut drift)?;
    }
    Ok(z)
}
