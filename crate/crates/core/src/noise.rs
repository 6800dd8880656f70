//! Random forcing `beta(t) = sum_k I_k(t) eta_k(t - k)` built from i.i.d.
//! unit-interval segments `eta_k(t) = sum_j b_j xi_jk g_j(t)`.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormal basis of `L^2([0, 1])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseBasis {
    /// `g_1 = 1`, `g_{2m} = sqrt2 cos(2 pi m t)`, `g_{2m+1} = sqrt2 sin(2 pi m t)`.
    #[default]
    Trig,
}

impl NoiseBasis {
    /// `g_j(t)` with 1-based `j`.
    pub fn eval(&self, j: usize, t: f64) -> f64 {
        match self {
            NoiseBasis::Trig => trig(j, t),
        }
    }
}

#[inline]
pub fn trig(j: usize, t: f64) -> f64 {
    debug_assert!(j >= 1);
    if j == 1 {
        return 1.0;
    }
    let m = (j / 2) as f64;
    let arg = 2.0 * PI * m * t;
    if j.is_multiple_of(2) {
        SQRT_2 * arg.cos()
    } else {
        SQRT_2 * arg.sin()
    }
}

/// Law of the coefficients `xi_jk`: unit second moment, continuous density
/// positive at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientLaw {
    #[default]
    StandardNormal,
    /// Uniform on `[-sqrt3, sqrt3]`.
    UniformSym,
}

impl CoefficientLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            CoefficientLaw::StandardNormal => StandardNormal.sample(rng),
            CoefficientLaw::UniformSym => {
                let a = 3f64.sqrt();
                rng.random_range(-a..a)
            }
        }
    }

    /// `P{|xi| < r}`.
    pub fn prob_abs_below(&self, r: f64) -> f64 {
        match self {
            CoefficientLaw::StandardNormal => {
                use statrs::distribution::{ContinuousCDF, Normal};
                let n = Normal::new(0.0, 1.0).expect("standard normal");
                n.cdf(r) - n.cdf(-r)
            }
            CoefficientLaw::UniformSym => (r / 3f64.sqrt()).min(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseModelDoc", into = "NoiseModelDoc")]
pub struct NoiseModel {
    b: Vec<f64>,
    law: CoefficientLaw,
    basis: NoiseBasis,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseModelDoc {
    #[serde(rename = "J")]
    j: usize,
    b: Vec<f64>,
    #[serde(default)]
    dist: CoefficientLaw,
    #[serde(default)]
    basis: NoiseBasisName,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
enum NoiseBasisName {
    #[default]
    #[serde(rename = "trig")]
    Trig,
}

impl TryFrom<NoiseModelDoc> for NoiseModel {
    type Error = Error;

    fn try_from(doc: NoiseModelDoc) -> Result<Self> {
        if doc.j != doc.b.len() {
            return Err(Error::InvalidArgument(format!("J = {} but {} coefficients", doc.j, doc.b.len())));
        }
        let basis = match doc.basis {
            NoiseBasisName::Trig => NoiseBasis::Trig,
        };
        NoiseModel::new(doc.b, doc.dist, basis)
    }
}

impl From<NoiseModel> for NoiseModelDoc {
    fn from(m: NoiseModel) -> Self {
        NoiseModelDoc { j: m.b.len(), b: m.b, dist: m.law, basis: NoiseBasisName::Trig }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::power_law(8)
    }
}

impl NoiseModel {
    pub fn new(b: Vec<f64>, law: CoefficientLaw, basis: NoiseBasis) -> Result<Self> {
        if b.is_empty() {
            return Err(Error::InvalidArgument("noise model needs J >= 1".into()));
        }
        if let Some(bad) = b.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::InvalidArgument(format!("coefficient b_j = {bad} must be finite and >= 0")));
        }
        Ok(Self { b, law, basis })
    }

    /// `b_j = j^-2`, standard normal coefficients, trigonometric basis.
    pub fn power_law(j: usize) -> Self {
        let b = (1..=j.max(1)).map(|k| 1.0 / (k * k) as f64).collect();
        Self { b, law: CoefficientLaw::StandardNormal, basis: NoiseBasis::Trig }
    }

    pub fn zero(j: usize) -> Self {
        Self { b: vec![0.0; j.max(1)], law: CoefficientLaw::StandardNormal, basis: NoiseBasis::Trig }
    }

    pub fn with_law(mut self, law: CoefficientLaw) -> Self {
        self.law = law;
        self
    }

    pub fn truncation(&self) -> usize {
        self.b.len()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.b
    }

    pub fn law(&self) -> CoefficientLaw {
        self.law
    }

    pub fn basis(&self) -> NoiseBasis {
        self.basis
    }

    /// `sum b_j^2 = E ||eta||^2_{L^2}`.
    pub fn energy(&self) -> f64 {
        self.b.iter().map(|b| b * b).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.b.iter().all(|&b| b == 0.0)
    }

    /// Largest `N` with `b_1, ..., b_N` all non-zero.
    pub fn nondegenerate_prefix(&self) -> usize {
        self.b.iter().take_while(|&&b| b != 0.0).count()
    }

    /// `g_j` at the midpoints of `substeps` equal sub-intervals, row-major
    /// by substep.
    pub fn midpoint_table(&self, substeps: usize) -> Vec<f64> {
        let jn = self.truncation();
        let mut table = Vec::with_capacity(substeps * jn);
        for s in 0..substeps {
            let t = (s as f64 + 0.5) / substeps as f64;
            for j in 1..=jn {
                table.push(self.basis.eval(j, t));
            }
        }
        table
    }

    /// Weights `b_j xi_j` of a segment.
    pub fn weights(&self, segment: &NoiseSegment) -> Vec<f64> {
        self.b.iter().zip(&segment.xi).map(|(b, x)| b * x).collect()
    }
}

/// The sampled coefficients `xi_j` of one `eta_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSegment {
    pub xi: Vec<f64>,
}

impl NoiseSegment {
    pub fn zeros(j: usize) -> Self {
        Self { xi: vec![0.0; j] }
    }
}

pub fn sample_segment<R: Rng + ?Sized>(model: &NoiseModel, rng: &mut R) -> NoiseSegment {
    NoiseSegment { xi: (0..model.truncation()).map(|_| model.law.sample(rng)).collect() }
}

/// `eta(t) = sum_j b_j xi_j g_j(t)` on `[0, 1]`.
pub fn evaluate(segment: &NoiseSegment, model: &NoiseModel, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfDomain { t });
    }
    Ok(model
        .b
        .iter()
        .zip(&segment.xi)
        .enumerate()
        .map(|(j, (b, x))| b * x * model.basis.eval(j + 1, t))
        .sum())
}

/// `beta(t)`: segment `floor(t)` at local time `t - floor(t)`.
pub fn beta_eval(path: &[NoiseSegment], model: &NoiseModel, t: f64) -> Result<f64> {
    if t < 0.0 || !t.is_finite() {
        return Err(Error::OutOfDomain { t });
    }
    let k = t.floor() as usize;
    if k >= path.len() {
        return Err(Error::PathExhausted { t, segment: k, len: path.len() });
    }
    evaluate(&path[k], model, t - k as f64)
}

/// Stream for trajectory `i`, segment `k`: the ChaCha key comes from the
/// master seed, the stream id is `i`, and the word position starts at `k << 32`.
/// Any schedule of workers reproduces the same draws.
pub fn segment_rng(master_seed: u64, trajectory: u64, segment: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trajectory);
    rng.set_word_pos((segment as u128) << 32);
    rng
}

/// Sub-seed for a named purpose, so separate experiment parts do not share
/// streams.
pub fn derive_seed(master_seed: u64, purpose: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master_seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rows `k,j,xi` for audit.
pub fn write_path_csv<W: Write>(path: &[NoiseSegment], mut out: W) -> std::io::Result<()> {
    writeln!(out, "k,j,xi")?;
    for (k, seg) in path.iter().enumerate() {
        for (j, xi) in seg.xi.iter().enumerate() {
            writeln!(out, "{k},{},{xi:e}", j + 1)?;
        }
    }
    Ok(())
}
