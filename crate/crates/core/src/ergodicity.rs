//! Monte Carlo side of the randomly forced system: cell partitions of the
//! sphere, empirical laws, total-variation mixing, hitting times of balls
//! around `e_1`, one-step kernel contraction and the coupled chain.
//!
//! Every experiment is a pure function of its master seed. Trajectory `i`
//! draws its segment `k` from [`noise::segment_rng`]`(seed, i, k)`, so
//! results do not depend on the number of worker threads.

use std::hash::{Hash, Hasher};
use std::io::Write;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dynamics::{MarkovStepper, PropagatorConfig};
use crate::error::{Error, Result};
use crate::linalg::{self, distance, geodesic_point, random_sphere_point, random_tangent, Cvec, Pair};
use crate::noise::{self, NoiseModel};
use crate::system::SystemSpec;

/// Stream purposes for [`noise::derive_seed`].
const PURPOSE_PARTITION: u64 = 11;
const PURPOSE_INIT: u64 = 12;
const PURPOSE_KERNEL: u64 = 13;
const PURPOSE_PAIRS: u64 = 14;
const PURPOSE_FLOOR: u64 = 15;
const PURPOSE_COUPLING: u64 = 16;

/// Finite partition of the sphere into nearest-centroid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    centroids: Vec<Cvec>,
    id: u64,
}

impl Partition {
    pub fn new(centroids: Vec<Cvec>) -> Result<Self> {
        if centroids.len() < 2 {
            return Err(Error::InvalidArgument(format!("a partition needs M >= 2 cells, got {}", centroids.len())));
        }
        let n = centroids[0].len();
        for c in &centroids {
            if c.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: c.len() });
            }
            if !linalg::is_on_sphere(c) {
                return Err(Error::InvalidArgument("partition centroids must lie on the unit sphere".into()));
            }
        }
        let mut h = std::hash::DefaultHasher::new();
        for c in &centroids {
            for x in c.iter() {
                x.re.to_bits().hash(&mut h);
                x.im.to_bits().hash(&mut h);
            }
        }
        Ok(Self { centroids, id: h.finish() })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn centroids(&self) -> &[Cvec] {
        &self.centroids
    }

    /// Fingerprint of the centroids; measures on different partitions do not
    /// compare.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Index of the nearest centroid, ties to the lowest index.
    pub fn assign(&self, z: &Cvec) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centroids.iter().enumerate() {
            let d: f64 = z.iter().zip(c.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn to_json(&self) -> Result<String> {
        let doc: Vec<Vec<Pair>> = self.centroids.iter().map(linalg::to_pairs).collect();
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Vec<Vec<Pair>> = serde_json::from_str(s)?;
        Self::new(doc.iter().map(|c| linalg::from_pair_vec(c)).collect())
    }
}

fn real_coords(z: &Cvec) -> Vec<f64> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

/// Numerical rank of the real sample covariance.
fn covariance_rank(samples: &[Cvec]) -> usize {
    let d = 2 * samples[0].len();
    let m = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for z in samples {
        for (a, x) in mean.iter_mut().zip(real_coords(z)) {
            *a += x / m;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for z in samples {
        let x: Vec<f64> = real_coords(z).iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += x[i] * x[j] / m;
            }
        }
    }
    let sv = cov.symmetric_eigenvalues();
    let top = sv.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    sv.iter().filter(|&&s| s.abs() > 1e-10 * top.max(1e-300)).count()
}

/// Spherical k-means with k-means++ seeding and a fixed iteration count.
pub fn kmeans<R: Rng + ?Sized>(samples: &[Cvec], m: usize, iterations: usize, rng: &mut R) -> Result<Partition> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("a partition needs M >= 2 cells, got {m}")));
    }
    if samples.len() < m {
        return Err(Error::InvalidArgument(format!("{} samples cannot seed {m} cells", samples.len())));
    }
    let d2 = |a: &Cvec, b: &Cvec| -> f64 { a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum() };
    let mut centroids = vec![samples[rng.random_range(0..samples.len())].clone()];
    let mut dist: Vec<f64> = samples.iter().map(|z| d2(z, &centroids[0])).collect();
    while centroids.len() < m {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = samples.len() - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..samples.len())
        };
        let c = samples[next].clone();
        for (dv, z) in dist.iter_mut().zip(samples) {
            *dv = dv.min(d2(z, &c));
        }
        centroids.push(c);
    }
    let n = samples[0].len();
    for _ in 0..iterations {
        let part = Partition { centroids: centroids.clone(), id: 0 };
        let labels: Vec<usize> = samples.par_iter().map(|z| part.assign(z)).collect();
        let mut sums = vec![Cvec::zeros(n); m];
        for (z, &l) in samples.iter().zip(&labels) {
            sums[l] += z;
        }
        for (c, s) in centroids.iter_mut().zip(sums) {
            // empty cells keep their centroid
            if let Ok(v) = linalg::sphere_renormalize(&s) {
                *c = v;
            }
        }
    }
    Partition::new(centroids)
}

/// Centroids from k-means (50 iterations) on `n_seed` chain samples started
/// from `e_1`.
pub fn make_partition(
    spec: &SystemSpec,
    model: &NoiseModel,
    m: usize,
    n_seed: usize,
    seed: u64,
    config: &PropagatorConfig,
) -> Result<Partition> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("a partition needs M >= 2 cells, got {m}")));
    }
    let stepper = MarkovStepper::new(spec, model, *config)?;
    let pseed = noise::derive_seed(seed, PURPOSE_PARTITION);
    let mut z = spec.e1().clone();
    let mut samples = Vec::with_capacity(n_seed);
    for k in 0..n_seed {
        z = stepper.step(&z, &mut noise::segment_rng(pseed, 0, k as u64))?;
        samples.push(z.clone());
    }
    let needed = 2 * spec.dim() - 1;
    let rank = if samples.len() > 1 { covariance_rank(&samples) } else { 0 };
    if rank < needed {
        return Err(Error::DegenerateSamples { rank, needed });
    }
    kmeans(&samples, m, 50, &mut noise::segment_rng(pseed, 1, 0))
}

/// Cell weights of a probability law on a [`Partition`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub partition_id: u64,
    pub weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn from_counts(partition: &Partition, counts: &[usize]) -> Result<Self> {
        if counts.len() != partition.len() {
            return Err(Error::DimensionMismatch { expected: partition.len(), got: counts.len() });
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("empirical measure of zero samples".into()));
        }
        let weights = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self { partition_id: partition.id(), weights })
    }

    pub fn from_samples(partition: &Partition, samples: &[Cvec]) -> Result<Self> {
        let mut counts = vec![0; partition.len()];
        for z in samples {
            counts[partition.assign(z)] += 1;
        }
        Self::from_counts(partition, &counts)
    }

    pub fn point_mass(partition: &Partition, cell: usize) -> Self {
        let mut weights = vec![0.0; partition.len()];
        weights[cell] = 1.0;
        Self { partition_id: partition.id(), weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn max_mass(&self) -> f64 {
        self.weights.iter().fold(0.0, |a, &b| a.max(b))
    }

    /// Cell index drawn from the weights.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_weights(&self.weights, rng)
    }
}

fn sample_weights<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &x) in w.iter().enumerate() {
        if x > 0.0 {
            if u < x {
                return i;
            }
            u -= x;
            last = i;
        }
    }
    last
}

/// `(1/2) sum_c |p_c - q_c|`, the supremum over unions of cells.
pub fn tv_distance(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Result<f64> {
    if p.partition_id != q.partition_id || p.len() != q.len() {
        return Err(Error::PartitionMismatch);
    }
    Ok(0.5 * p.weights.iter().zip(&q.weights).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Initial law of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point(Cvec),
    UniformSphere,
}

impl InitialLaw {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Cvec {
        match self {
            InitialLaw::Point(z) => z.clone(),
            InitialLaw::UniformSphere => random_sphere_point(n, rng),
        }
    }
}

/// Cell index of `z_k` for `k = 0..=k_max`, trajectory `i`.
fn trajectory_cells(
    stepper: &MarkovStepper<'_>,
    law: &InitialLaw,
    n: usize,
    k_max: usize,
    partition: &Partition,
    seed: u64,
    i: u64,
) -> Result<Vec<u32>> {
    let mut z = law.sample(n, &mut noise::segment_rng(noise::derive_seed(seed, PURPOSE_INIT), i, 0));
    let mut cells = Vec::with_capacity(k_max + 1);
    cells.push(partition.assign(&z) as u32);
    for k in 0..k_max {
        z = stepper.step(&z, &mut noise::segment_rng(seed, i, k as u64))?;
        cells.push(partition.assign(&z) as u32);
    }
    Ok(cells)
}

/// Cell histograms of `n` independent trajectories at `k = 0..=k_max`.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_push(
    spec: &SystemSpec,
    model: &NoiseModel,
    law: &InitialLaw,
    k_max: usize,
    n: usize,
    partition: &Partition,
    seed: u64,
    config: &PropagatorConfig,
) -> Result<Vec<EmpiricalMeasure>> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("ensembles need N >= 100 trajectories, got {n}")));
    }
    if partition.dim() != spec.dim() {
        return Err(Error::DimensionMismatch { expected: spec.dim(), got: partition.dim() });
    }
    let stepper = MarkovStepper::new(spec, model, *config)?;
    let dim = spec.dim();
    let cells: Vec<Vec<u32>> = (0..n as u64)
        .into_par_iter()
        .map(|i| trajectory_cells(&stepper, law, dim, k_max, partition, seed, i))
        .collect::<Result<_>>()?;
    (0..=k_max)
        .map(|k| {
            let mut counts = vec![0usize; partition.len()];
            for traj in &cells {
                counts[traj[k] as usize] += 1;
            }
            EmpiricalMeasure::from_counts(partition, &counts)
        })
        .collect()
}

/// Cell histogram of one trajectory over `steps` steps after `burn_in`.
#[allow(clippy::too_many_arguments)]
pub fn time_average(
    spec: &SystemSpec,
    model: &NoiseModel,
    z0: &Cvec,
    burn_in: usize,
    steps: usize,
    partition: &Partition,
    seed: u64,
    config: &PropagatorConfig,
) -> Result<EmpiricalMeasure> {
    let stepper = MarkovStepper::new(spec, model, *config)?;
    let mut counts = vec![0usize; partition.len()];
    let mut z = z0.clone();
    for k in 0..burn_in + steps {
        z = stepper.step(&z, &mut noise::segment_rng(seed, 0, k as u64))?;
        if k >= burn_in {
            counts[partition.assign(&z)] += 1;
        }
    }
    EmpiricalMeasure::from_counts(partition, &counts)
}

pub fn tv_series(a: &[EmpiricalMeasure], b: &[EmpiricalMeasure]) -> Result<Vec<(usize, f64)>> {
    a.iter().zip(b).enumerate().map(|(k, (p, q))| Ok((k, tv_distance(p, q)?))).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Median over `k >= 1` of a same-law TV series.
pub fn noise_floor(same_law: &[(usize, f64)]) -> f64 {
    median(same_law.iter().filter(|(k, _)| *k >= 1).map(|&(_, tv)| tv).collect())
}

/// Ordinary least squares `y = a + s x` with a two-sided 95% interval on `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_ci: (f64, f64),
    pub points: usize,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let m = x.len();
    if m < 3 || y.len() != m {
        return Err(Error::InsufficientSignal { usable: m });
    }
    let mf = m as f64;
    let mx = x.iter().sum::<f64>() / mf;
    let my = y.iter().sum::<f64>() / mf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InsufficientSignal { usable: m });
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let se = (sse / (mf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, mf - 2.0)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(LinearFit { intercept, slope, slope_ci: (slope - t * se, slope + t * se), points: m })
}

/// Fit of `TV_k <= C e^{-c k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub tv_series: Vec<(usize, f64)>,
    /// Same-law, different-seed TV series behind the noise floor.
    pub same_law_series: Vec<(usize, f64)>,
    pub noise_floor: f64,
    pub c_const: f64,
    pub rate: f64,
    pub rate_ci: (f64, f64),
    /// Inclusive range of `k` used by the fit.
    pub fit_window: (usize, usize),
}

impl MixingReport {
    pub fn tv_at(&self, k: usize) -> Option<f64> {
        self.tv_series.iter().find(|(j, _)| *j == k).map(|&(_, tv)| tv)
    }

    pub fn rate_significant(&self) -> bool {
        self.rate > 0.0 && self.rate_ci.0 > 0.0
    }

    /// CSV with columns `k,tv,noise_floor`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,tv,noise_floor")?;
        for &(k, tv) in &self.tv_series {
            writeln!(out, "{k},{tv:.10e},{:.10e}", self.noise_floor)?;
        }
        Ok(())
    }
}

/// Least-squares fit of `log TV_k` against `k` over the first contiguous run
/// of `k >= 1` with `TV_k >= 2 noise_floor`.
pub fn mixing_rate(tv: &[(usize, f64)], same_law: &[(usize, f64)]) -> Result<MixingReport> {
    if tv.len() < 10 {
        return Err(Error::InvalidArgument(format!("mixing fits need at least 10 points, got {}", tv.len())));
    }
    let floor = noise_floor(same_law);
    let usable = |v: f64| v > 0.0 && v >= 2.0 * floor;
    let window: Vec<(usize, f64)> = tv
        .iter()
        .copied()
        .filter(|(k, _)| *k >= 1)
        .skip_while(|&(_, v)| !usable(v))
        .take_while(|&(_, v)| usable(v))
        .collect();
    if window.len() < 4 {
        return Err(Error::InsufficientSignal { usable: window.len() });
    }
    let x: Vec<f64> = window.iter().map(|&(k, _)| k as f64).collect();
    let y: Vec<f64> = window.iter().map(|&(_, v)| v.ln()).collect();
    let fit = linear_fit(&x, &y)?;
    Ok(MixingReport {
        tv_series: tv.to_vec(),
        same_law_series: same_law.to_vec(),
        noise_floor: floor,
        c_const: fit.intercept.exp(),
        rate: -fit.slope,
        rate_ci: (-fit.slope_ci.1, -fit.slope_ci.0),
        fit_window: (window[0].0, window[window.len() - 1].0),
    })
}

/// `(k, TV_k)` pairs.
pub type Series = Vec<(usize, f64)>;

/// TV series between two initial laws, and of `law_a` against itself
/// under an independent seed.
#[allow(clippy::too_many_arguments)]
pub fn mixing_series(
    spec: &SystemSpec,
    model: &NoiseModel,
    law_a: &InitialLaw,
    law_b: &InitialLaw,
    k_max: usize,
    n: usize,
    partition: &Partition,
    seed: u64,
    config: &PropagatorConfig,
) -> Result<(Series, Series)> {
    let a = ensemble_push(spec, model, law_a, k_max, n, partition, noise::derive_seed(seed, 1), config)?;
    let b = ensemble_push(spec, model, law_b, k_max, n, partition, noise::derive_seed(seed, 2), config)?;
    let a2 = ensemble_push(spec, model, law_a, k_max, n, partition, noise::derive_seed(seed, 3), config)?;
    Ok((tv_series(&a, &b)?, tv_series(&a, &a2)?))
}

/// [`mixing_series`] followed by [`mixing_rate`].
#[allow(clippy::too_many_arguments)]
pub fn mixing_experiment(
    spec: &SystemSpec,
    model: &NoiseModel,
    law_a: &InitialLaw,
    law_b: &InitialLaw,
    k_max: usize,
    n: usize,
    partition: &Partition,
    seed: u64,
    config: &PropagatorConfig,
) -> Result<MixingReport> {
    let (tv, same) = mixing_series(spec, model, law_a, law_b, k_max, n, partition, seed, config)?;
    mixing_rate(&tv, &same)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingReport {
    pub delta: f64,
    pub alpha: f64,
    pub k_max: usize,
    /// `tau` of each chain, `None` when censored at `k_max`.
    pub samples: Vec<Option<usize>>,
    pub censored: usize,
    /// Mean of `e^{alpha tau}` over uncensored chains.
    pub estimate: f64,
    pub mean_tau: f64,
    /// `(m, P{tau > m})` on a regular grid.
    pub survival: Vec<(usize, f64)>,
    pub tail_fit: Option<LinearFit>,
}

impl HittingReport {
    pub fn censored_fraction(&self) -> f64 {
        self.censored as f64 / self.samples.len() as f64
    }

    /// Upper end of the 95% interval of the survival log-slope is negative.
    pub fn geometric_tail(&self) -> bool {
        self.tail_fit.is_some_and(|f| f.slope_ci.1 < 0.0)
    }
}

/// First `k` with `||U_k(z) - e_1|| < delta`, capped at `k_max`.
fn hit_once(stepper: &MarkovStepper<'_>, e1: &Cvec, z: &Cvec, delta: f64, k_max: usize, seed: u64, i: u64) -> Result<Option<usize>> {
    let mut y = z.clone();
    for k in 0..=k_max {
        if distance(&y, e1) < delta {
            return Ok(Some(k));
        }
        if k == k_max {
            break;
        }
        y = stepper.step(&y, &mut noise::segment_rng(seed, i, k as u64))?;
    }
    Ok(None)
}

/// Hitting times of `B(e_1, delta)` for `n` chains from `z`; the report
/// is also produced when censoring exceeds 5%.
#[allow(clippy::too_many_arguments)]
pub fn hitting_experiment(
    spec: &SystemSpec,
    model: &NoiseModel,
    z: &Cvec,
    delta: f64,
    alpha: f64,
    k_max: usize,
    n: usize,
    seed: u64,
    config: &PropagatorConfig,
) -> Result<HittingReport> {
    if delta.is_nan() || alpha.is_nan() || delta <= 0.0 || alpha <= 0.0 {
        return Err(Error::InvalidArgument(format!("need delta > 0 and alpha > 0, got {delta}, {alpha}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("hitting times need N >= 1 chains".into()));
    }
    let stepper = MarkovStepper::new(spec, model, *config)?;
    let e1 = spec.e1();
    let samples: Vec<Option<usize>> = (0..n as u64)
        .into_par_iter()
        .map(|i| hit_once(&stepper, e1, z, delta, k_max, seed, i))
        .collect::<Result<_>>()?;
    let hits: Vec<usize> = samples.iter().flatten().copied().collect();
    let censored = n - hits.len();
    let estimate = if hits.is_empty() {
        f64::NAN
    } else {
        hits.iter().map(|&t| (alpha * t as f64).exp()).sum::<f64>() / hits.len() as f64
    };
    let mean_tau = if hits.is_empty() { f64::NAN } else { hits.iter().sum::<usize>() as f64 / hits.len() as f64 };
    let stride = (k_max / 50).max(1);
    let survival: Vec<(usize, f64)> = (0..=k_max)
        .step_by(stride)
        .map(|m| (m, samples.iter().filter(|s| s.is_none_or(|t| t > m)).count() as f64 / n as f64))
        .collect();
    // regress where at least 20 chains survive
    let min_p = 20.0 / n as f64;
    let (x, y): (Vec<f64>, Vec<f64>) =
        survival.iter().filter(|&&(_, p)| p >= min_p).map(|&(m, p)| (m as f64, p.ln())).unzip();
    let tail_fit = linear_fit(&x, &y).ok();
    Ok(HittingReport { delta, alpha, k_max, samples, censored, estimate, mean_tau, survival, tail_fit })
}

/// [`hitting_experiment`] with the 5% censoring policy enforced.
#[allow(clippy::too_many_arguments)]
pub fn hitting_time(
    spec: &SystemSpec,
    model: &NoiseModel,
    z: &Cvec,
    delta: f64,
    alpha: f64,
    k_max: usize,
    n: usize,
    seed: u64,
    config: &PropagatorConfig,
) -> Result<HittingReport> {
    let r = hitting_experiment(spec, model, z, delta, alpha, k_max, n, seed, config)?;
    if r.censored_fraction() > 0.05 {
        return Err(Error::HeavyCensoring { censored: r.censored, total: n });
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionEstimate {
    pub source: Cvec,
    pub row: EmpiricalMeasure,
    pub samples: usize,
}

fn one_step_samples(
    stepper: &MarkovStepper<'_>,
    z: &Cvec,
    n: usize,
    seed: u64,
) -> Result<Vec<Cvec>> {
    (0..n as u64).into_par_iter().map(|i| stepper.step(z, &mut noise::segment_rng(seed, i, 0))).collect()
}

/// Histogram of `n` one-step samples from `z`.
pub fn estimate_kernel(
    spec: &SystemSpec,
    model: &NoiseModel,
    z: &Cvec,
    partition: &Partition,
    n: usize,
    seed: u64,
    config: &PropagatorConfig,
) -> Result<TransitionEstimate> {
    if n < 1000 {
        return Err(Error::InvalidArgument(format!("kernel rows need N >= 1000 samples, got {n}")));
    }
    let stepper = MarkovStepper::new(spec, model, *config)?;
    let samples = one_step_samples(&stepper, z, n, seed)?;
    Ok(TransitionEstimate { source: z.clone(), row: EmpiricalMeasure::from_samples(partition, &samples)?, samples: n })
}

/// A point of `S ∩ B(y, radius)`, roughly uniform in the ball.
pub fn sample_in_ball<R: Rng + ?Sized>(y: &Cvec, radius: f64, rng: &mut R) -> Cvec {
    let dim = 2 * y.len() - 1;
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    geodesic_point(y, &random_tangent(y, rng), r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub delta0: f64,
    pub samples: usize,
    pub pair_tvs: Vec<f64>,
    pub noise_floor: f64,
    /// Worst pair TV minus the noise floor, clamped at zero.
    pub p_hat: f64,
    pub mean_tv: f64,
    pub below_one: bool,
}

/// Largest estimated `||P_1(z, .) - P_1(z', .)||_var` over `pairs` pairs in
/// `B(e_1, delta0)`, less the same-state TV of two independent estimates.
#[allow(clippy::too_many_arguments)]
pub fn contraction_probe(
    spec: &SystemSpec,
    model: &NoiseModel,
    delta0: f64,
    partition: &Partition,
    n: usize,
    pairs: usize,
    seed: u64,
    config: &PropagatorConfig,
) -> Result<ContractionReport> {
    let e1 = spec.e1();
    let mut prng = noise::segment_rng(noise::derive_seed(seed, PURPOSE_PAIRS), 0, 0);
    let states: Vec<(Cvec, Cvec)> =
        (0..pairs).map(|_| (sample_in_ball(e1, delta0, &mut prng), sample_in_ball(e1, delta0, &mut prng))).collect();
    let kseed = noise::derive_seed(seed, PURPOSE_KERNEL);
    let mut pair_tvs = Vec::with_capacity(pairs);
    for (j, (a, b)) in states.iter().enumerate() {
        let p = estimate_kernel(spec, model, a, partition, n, noise::derive_seed(kseed, 2 * j as u64), config)?;
        let q = estimate_kernel(spec, model, b, partition, n, noise::derive_seed(kseed, 2 * j as u64 + 1), config)?;
        pair_tvs.push(tv_distance(&p.row, &q.row)?);
    }
    let fseed = noise::derive_seed(seed, PURPOSE_FLOOR);
    let mut floors = Vec::new();
    for r in 0..3u64 {
        let p = estimate_kernel(spec, model, e1, partition, n, noise::derive_seed(fseed, 2 * r), config)?;
        let q = estimate_kernel(spec, model, e1, partition, n, noise::derive_seed(fseed, 2 * r + 1), config)?;
        floors.push(tv_distance(&p.row, &q.row)?);
    }
    let floor = median(floors);
    let worst = pair_tvs.iter().fold(0.0f64, |a, &b| a.max(b));
    let p_hat = (worst - floor).max(0.0);
    let mean_tv = pair_tvs.iter().sum::<f64>() / pair_tvs.len().max(1) as f64;
    Ok(ContractionReport { delta0, samples: n, pair_tvs, noise_floor: floor, p_hat, mean_tv, below_one: p_hat < 1.0 })
}

/// Draw from a maximal coupling of two cell rows: `(cell, cell', met)`.
pub fn maximal_coupling_sample<R: Rng + ?Sized>(
    p: &EmpiricalMeasure,
    q: &EmpiricalMeasure,
    rng: &mut R,
) -> Result<(usize, usize, bool)> {
    let tv = tv_distance(p, q)?;
    let overlap: Vec<f64> = p.weights.iter().zip(&q.weights).map(|(a, b)| a.min(*b)).collect();
    let common: f64 = overlap.iter().sum();
    if common > 0.0 && rng.random::<f64>() * (common + tv) < common {
        let c = sample_weights(&overlap, rng);
        return Ok((c, c, true));
    }
    let rp: Vec<f64> = p.weights.iter().zip(&overlap).map(|(a, o)| (a - o).max(0.0)).collect();
    let rq: Vec<f64> = q.weights.iter().zip(&overlap).map(|(a, o)| (a - o).max(0.0)).collect();
    Ok((sample_weights(&rp, rng), sample_weights(&rq, rng), false))
}

/// One-step kernel estimated from a cell centroid, with the sampled
/// endpoints kept per target cell.
#[derive(Debug, Clone)]
pub struct CellKernel {
    pub row: EmpiricalMeasure,
    pub buckets: Vec<Vec<Cvec>>,
}

/// Lazily filled per-cell kernel rows shared by all coupled runs.
pub struct KernelCache<'a> {
    spec: &'a SystemSpec,
    model: &'a NoiseModel,
    partition: &'a Partition,
    n_kernel: usize,
    seed: u64,
    config: PropagatorConfig,
    cells: Vec<OnceLock<std::result::Result<CellKernel, Error>>>,
}

impl<'a> KernelCache<'a> {
    pub fn new(
        spec: &'a SystemSpec,
        model: &'a NoiseModel,
        partition: &'a Partition,
        n_kernel: usize,
        seed: u64,
        config: PropagatorConfig,
    ) -> Result<Self> {
        if n_kernel < 1000 {
            return Err(Error::InvalidArgument(format!("kernel rows need N >= 1000 samples, got {n_kernel}")));
        }
        config.validate()?;
        let cells = (0..partition.len()).map(|_| OnceLock::new()).collect();
        Ok(Self { spec, model, partition, n_kernel, seed, config, cells })
    }

    /// Row of cell `c`, estimated on first use; the estimate depends only on
    /// `(seed, c)`.
    pub fn get(&self, c: usize) -> Result<&CellKernel> {
        self.cells[c]
            .get_or_init(|| {
                let stepper = MarkovStepper::new(self.spec, self.model, self.config)?;
                let z = &self.partition.centroids()[c];
                let samples = one_step_samples(&stepper, z, self.n_kernel, noise::derive_seed(self.seed, c as u64))?;
                let mut buckets = vec![Vec::new(); self.partition.len()];
                for s in samples {
                    buckets[self.partition.assign(&s)].push(s);
                }
                let counts: Vec<usize> = buckets.iter().map(Vec::len).collect();
                Ok(CellKernel { row: EmpiricalMeasure::from_counts(self.partition, &counts)?, buckets })
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn filled(&self) -> usize {
        self.cells.iter().filter(|c| c.get().is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledRun {
    /// Step `l` with `y_l = y'_l`, `None` if the chains never met.
    pub meeting_step: Option<usize>,
    /// Steps `T(1) < T(2) < ...` at which both chains were in `B(e_1, delta0)`
    /// and unmet, i.e. the coupling attempts.
    pub attempts: Vec<usize>,
    /// After meeting the two chains were identical at every step.
    pub absorbing: bool,
    pub steps: usize,
}

/// Cell-level coupled chain. Inside `B(e_1, delta0)` both chains move by a
/// maximal coupling of their cells' kernel rows, each landing on a stored
/// endpoint of the chosen target cell; elsewhere they move independently;
/// after meeting both take the same noise segment.
#[allow(clippy::too_many_arguments)]
pub fn coupled_chain(
    spec: &SystemSpec,
    model: &NoiseModel,
    z0: &Cvec,
    z0p: &Cvec,
    delta0: f64,
    cache: &KernelCache<'_>,
    max_steps: usize,
    seed: u64,
    config: &PropagatorConfig,
) -> Result<CoupledRun> {
    let stepper = MarkovStepper::new(spec, model, *config)?;
    let e1 = spec.e1();
    let partition = cache.partition;
    let mut y = z0.clone();
    let mut yp = z0p.clone();
    let mut met = (y == yp).then_some(0);
    let mut attempts = Vec::new();
    let mut absorbing = true;
    let mut crng: ChaCha8Rng = noise::segment_rng(seed, 2, 0);
    for k in 0..max_steps {
        if met.is_some() {
            y = stepper.step(&y, &mut noise::segment_rng(seed, 0, k as u64))?;
            yp = y.clone();
        } else if distance(&y, e1) < delta0 && distance(&yp, e1) < delta0 {
            attempts.push(k);
            let (cy, cyp) = (partition.assign(&y), partition.assign(&yp));
            let (ky, kyp) = (cache.get(cy)?, cache.get(cyp)?);
            let (c, cp, m) = maximal_coupling_sample(&ky.row, &kyp.row, &mut crng)?;
            let pick = |b: &Vec<Cvec>, rng: &mut ChaCha8Rng| b[rng.random_range(0..b.len())].clone();
            y = pick(&ky.buckets[c], &mut crng);
            if m {
                yp = y.clone();
                met = Some(k + 1);
            } else {
                yp = pick(&kyp.buckets[cp], &mut crng);
            }
        } else {
            y = stepper.step(&y, &mut noise::segment_rng(seed, 0, k as u64))?;
            yp = stepper.step(&yp, &mut noise::segment_rng(seed, 1, k as u64))?;
        }
        if met.is_some() && y != yp {
            absorbing = false;
        }
    }
    Ok(CoupledRun { meeting_step: met, attempts, absorbing, steps: max_steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub delta0: f64,
    pub runs: Vec<CoupledRun>,
    pub max_steps: usize,
    pub met_fraction: f64,
    pub absorbing_all: bool,
    /// `(n, P{l > T(n + 1)})` from the attempt records.
    pub survival: Vec<(usize, f64)>,
    pub survival_fit: Option<LinearFit>,
    pub kernel_rows: usize,
}

impl CouplingReport {
    pub fn met_by(&self, step: usize) -> f64 {
        self.runs.iter().filter(|r| r.meeting_step.is_some_and(|l| l <= step)).count() as f64 / self.runs.len() as f64
    }
}

/// `runs` coupled chains from independent uniform starting pairs.
#[allow(clippy::too_many_arguments)]
pub fn coupling_experiment(
    spec: &SystemSpec,
    model: &NoiseModel,
    delta0: f64,
    partition: &Partition,
    n_kernel: usize,
    runs: usize,
    max_steps: usize,
    seed: u64,
    config: &PropagatorConfig,
) -> Result<CouplingReport> {
    let cache = KernelCache::new(spec, model, partition, n_kernel, noise::derive_seed(seed, PURPOSE_KERNEL), *config)?;
    let cseed = noise::derive_seed(seed, PURPOSE_COUPLING);
    let dim = spec.dim();
    let out: Vec<CoupledRun> = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let mut irng = noise::segment_rng(noise::derive_seed(cseed, r), 3, 0);
            let z0 = random_sphere_point(dim, &mut irng);
            let z0p = random_sphere_point(dim, &mut irng);
            coupled_chain(spec, model, &z0, &z0p, delta0, &cache, max_steps, noise::derive_seed(cseed, r), config)
        })
        .collect::<Result<_>>()?;
    let met_fraction = out.iter().filter(|r| r.meeting_step.is_some()).count() as f64 / runs.max(1) as f64;
    let absorbing_all = out.iter().all(|r| r.absorbing);
    // product-limit estimate of the probability that the first n + 1
    // attempts all fail
    let mut survival = Vec::new();
    let mut s = 1.0;
    for n in 0.. {
        let reached: Vec<&CoupledRun> = out.iter().filter(|r| r.attempts.len() > n).collect();
        if reached.len() < 10 {
            break;
        }
        let failed = reached
            .iter()
            .filter(|r| r.meeting_step.is_none_or(|l| l > r.attempts[n] + 1))
            .count();
        s *= failed as f64 / reached.len() as f64;
        if s <= 0.0 {
            break;
        }
        survival.push((n, s));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = survival.iter().map(|&(n, p)| (n as f64, p.ln())).unzip();
    let survival_fit = linear_fit(&x, &y).ok();
    Ok(CouplingReport {
        delta0,
        runs: out,
        max_steps,
        met_fraction,
        absorbing_all,
        survival,
        survival_fit,
        kernel_rows: cache.filled(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::basis_vector;
    use crate::system::sys_a;
    use crate::C64;
    use rand::SeedableRng;

    fn grid_partition(m: usize) -> Partition {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Partition::new((0..m).map(|_| random_sphere_point(2, &mut rng)).collect()).unwrap()
    }

    fn measure(p: &Partition, w: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure { partition_id: p.id(), weights: w.to_vec() }
    }

    #[test]
    fn tv_examples() {
        let p = grid_partition(2);
        let a = measure(&p, &[0.5, 0.5]);
        let b = measure(&p, &[1.0, 0.0]);
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(tv_distance(&a, &b).unwrap(), 0.5);
        assert_eq!(tv_distance(&b, &measure(&p, &[0.0, 1.0])).unwrap(), 1.0);
        let other = grid_partition(3);
        assert!(matches!(tv_distance(&a, &EmpiricalMeasure::point_mass(&other, 0)), Err(Error::PartitionMismatch)));
    }

    #[test]
    fn partition_rules() {
        assert!(Partition::new(vec![basis_vector(2, 0)]).is_err());
        let p = Partition::new(vec![basis_vector(2, 0), basis_vector(2, 1)]).unwrap();
        assert_eq!(p.assign(&basis_vector(2, 1)), 1);
        let mid = linalg::from_parts(&[(0.5f64.sqrt(), 0.0), (0.5f64.sqrt(), 0.0)]);
        assert_eq!(p.assign(&mid), 0);
        let back = Partition::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back.id(), p.id());
    }

    #[test]
    fn zero_noise_is_degenerate() {
        let spec = sys_a();
        let r = make_partition(&spec, &NoiseModel::zero(8), 8, 500, 1, &PropagatorConfig::default());
        assert!(matches!(r, Err(Error::DegenerateSamples { rank: 2, needed: 3 })));
        assert!(make_partition(&spec, &NoiseModel::default(), 1, 500, 1, &PropagatorConfig::default()).is_err());
    }

    #[test]
    fn coupling_examples() {
        let p = grid_partition(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = measure(&p, &[0.5, 0.5]);
        let b = measure(&p, &[1.0, 0.0]);
        let d = measure(&p, &[0.0, 1.0]);
        for _ in 0..1000 {
            assert!(maximal_coupling_sample(&a, &a, &mut rng).unwrap().2);
            assert!(!maximal_coupling_sample(&b, &d, &mut rng).unwrap().2);
        }
        let draws = 100_000;
        let (mut met, mut first_a, mut first_b) = (0, 0, 0);
        for _ in 0..draws {
            let (c, cp, m) = maximal_coupling_sample(&a, &b, &mut rng).unwrap();
            met += m as usize;
            first_a += (c == 0) as usize;
            first_b += (cp == 0) as usize;
        }
        let sigma = (0.25f64 / draws as f64).sqrt();
        assert!((met as f64 / draws as f64 - 0.5).abs() < 3.0 * sigma);
        assert!((first_a as f64 / draws as f64 - 0.5).abs() < 3.0 * sigma);
        assert_eq!(first_b, draws);
    }

    #[test]
    fn synthetic_mixing_fit() {
        let tv: Vec<(usize, f64)> = (0..30).map(|k| (k, 0.8 * (-0.3 * k as f64).exp())).collect();
        let zero: Vec<(usize, f64)> = (0..30).map(|k| (k, 0.0)).collect();
        let r = mixing_rate(&tv, &zero).unwrap();
        assert!((r.rate - 0.3).abs() < 1e-6);
        assert!((r.c_const - 0.8).abs() < 1e-6);
        assert!(r.rate_significant());
        assert_eq!(r.fit_window, (1, 29));
        assert!(matches!(mixing_rate(&zero, &zero), Err(Error::InsufficientSignal { usable: 0 })));
        assert!(mixing_rate(&tv[..5], &zero).is_err());
    }

    #[test]
    fn fit_against_closed_form() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.1, 4.9, 7.0];
        let f = linear_fit(&x, &y).unwrap();
        // closed-form OLS: slope = Sxy / Sxx = 9.9 / 5
        assert!((f.slope - 1.98).abs() < 1e-12);
        assert!((f.intercept - 1.03).abs() < 1e-12);
        assert!(f.slope_ci.0 < f.slope && f.slope < f.slope_ci.1);
    }

    #[test]
    fn deterministic_kernel_under_zero_noise() {
        let spec = sys_a();
        let p = grid_partition(16);
        let z = linalg::from_parts(&[(0.6, 0.0), (0.0, 0.8)]);
        let est = estimate_kernel(&spec, &NoiseModel::zero(8), &z, &p, 1000, 1, &PropagatorConfig::default()).unwrap();
        let target = p.assign(&spec.spectral().evolve(&z, 1.0));
        assert_eq!(est.row.weights[target], 1.0);
        assert!((est.row.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coupled_chain_same_start_meets_at_zero() {
        let spec = sys_a();
        let model = NoiseModel::default();
        let p = grid_partition(8);
        let cache = KernelCache::new(&spec, &model, &p, 1000, 1, PropagatorConfig::default()).unwrap();
        let z = basis_vector(2, 0) * C64::new(0.0, 1.0);
        let r = coupled_chain(&spec, &model, &z, &z, 0.2, &cache, 20, 7, &PropagatorConfig::default()).unwrap();
        assert_eq!(r.meeting_step, Some(0));
        assert!(r.absorbing);
        assert_eq!(cache.filled(), 0);
    }
}
