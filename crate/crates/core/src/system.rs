//! The forced system `i z' = Lambda z + beta(t) B z + eps F(z)` and the
//! coupling non-degeneracy check.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::galerkin::PowerNonlinearity;
use crate::linalg::{self, eigendecompose, inner, Cmat, Cvec, HermitianMatrix, Pair, SpectralData};

pub const DEFAULT_TOL_GAP: f64 = 1e-8;
pub const DEFAULT_TOL_COUPLING: f64 = 1e-10;

type CustomFn = dyn Fn(&Cvec) -> Cvec + Send + Sync;

/// The nonlinear term `F`. `<F(z), z>` must be real.
#[derive(Clone)]
pub enum Nonlinearity {
    None,
    GalerkinPower(Arc<PowerNonlinearity>),
    /// User supplied; analyticity is not verified and it cannot be serialized.
    Custom { label: String, f: Arc<CustomFn> },
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Nonlinearity {
    pub fn galerkin_power(n: usize, sigma: f64) -> Self {
        Nonlinearity::GalerkinPower(Arc::new(PowerNonlinearity::new(n, sigma)))
    }

    pub fn label(&self) -> String {
        match self {
            Nonlinearity::None => "none".into(),
            Nonlinearity::GalerkinPower(p) => format!("galerkin_power(sigma={})", p.sigma()),
            Nonlinearity::Custom { label, .. } => label.clone(),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Nonlinearity::None)
    }

    pub fn eval(&self, z: &Cvec) -> Cvec {
        match self {
            Nonlinearity::None => Cvec::zeros(z.len()),
            Nonlinearity::GalerkinPower(p) => p.eval(z),
            Nonlinearity::Custom { f, .. } => f(z),
        }
    }

    /// Homogeneity degree `sigma + 1` used in the realness tolerance.
    fn sigma(&self) -> f64 {
        match self {
            Nonlinearity::GalerkinPower(p) => p.sigma(),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemSpec {
    lambda: HermitianMatrix,
    b: HermitianMatrix,
    epsilon: f64,
    nonlinearity: Nonlinearity,
    spectral: SpectralData,
}

impl SystemSpec {
    pub fn new(
        lambda: HermitianMatrix,
        b: HermitianMatrix,
        epsilon: f64,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        let n = lambda.dim();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("dimension {n} < 2")));
        }
        if b.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, got: b.dim() });
        }
        if let Nonlinearity::GalerkinPower(p) = &nonlinearity {
            if p.dim() != n {
                return Err(Error::DimensionMismatch { expected: n, got: p.dim() });
            }
        }
        if !epsilon.is_finite() {
            return Err(Error::InvalidArgument("epsilon must be finite".into()));
        }
        let spectral = eigendecompose(&lambda)?;
        Ok(Self { lambda, b, epsilon, nonlinearity, spectral })
    }

    pub fn dim(&self) -> usize {
        self.lambda.dim()
    }

    pub fn lambda(&self) -> &HermitianMatrix {
        &self.lambda
    }

    pub fn b(&self) -> &HermitianMatrix {
        &self.b
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn nonlinearity(&self) -> &Nonlinearity {
        &self.nonlinearity
    }

    /// Spectral data of `Lambda`; `e(0)` is the `e_1` of the controllability
    /// constructions.
    pub fn spectral(&self) -> &SpectralData {
        &self.spectral
    }

    pub fn e1(&self) -> &Cvec {
        self.spectral.e(0)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..self.clone() }
    }

    pub fn with_nonlinearity(&self, nonlinearity: Nonlinearity) -> Result<Self> {
        Self::new(self.lambda.clone(), self.b.clone(), self.epsilon, nonlinearity)
    }

    /// Nonlinear part active.
    pub fn is_nonlinear(&self) -> bool {
        self.epsilon != 0.0 && !self.nonlinearity.is_none()
    }

    /// Both matrices real in the working coordinates (complex conjugation then
    /// commutes with the flow up to time reversal).
    pub fn is_real(&self) -> bool {
        self.lambda.is_real(1e-14) && self.b.is_real(1e-14)
    }

    /// `<B e_1, e_k>` for `k = 1..n`.
    pub fn couplings(&self) -> Vec<C64> {
        let be1 = self.b.apply(self.e1());
        self.spectral.eigenvectors.iter().map(|e| inner(&be1, e)).collect()
    }

    /// Largest `|Im <F(z), z>| / ||z||^(sigma+2)` over the sample points.
    pub fn nonlinearity_realness(&self, samples: &[Cvec]) -> f64 {
        let sigma = self.nonlinearity.sigma();
        samples
            .iter()
            .map(|z| {
                let r = linalg::norm(z);
                if r == 0.0 {
                    return 0.0;
                }
                inner(&self.nonlinearity.eval(z), z).im.abs() / r.powf(sigma + 2.0)
            })
            .fold(0.0, f64::max)
    }

    pub fn to_doc(&self) -> Result<SystemSpecDoc> {
        let nonlinearity = match &self.nonlinearity {
            Nonlinearity::None => NonlinearityDoc { kind: NonlinearityKind::None, sigma: None },
            Nonlinearity::GalerkinPower(p) => {
                NonlinearityDoc { kind: NonlinearityKind::GalerkinPower, sigma: Some(p.sigma()) }
            }
            Nonlinearity::Custom { label, .. } => {
                return Err(Error::Serialization(format!("custom nonlinearity '{label}' is not serializable")))
            }
        };
        Ok(SystemSpecDoc {
            n: self.dim(),
            lambda: self.lambda.matrix().transpose().iter().map(|&c| c.into()).collect(),
            b: self.b.matrix().transpose().iter().map(|&c| c.into()).collect(),
            epsilon: self.epsilon,
            nonlinearity,
        })
    }

    pub fn from_doc(doc: &SystemSpecDoc) -> Result<Self> {
        let n = doc.n;
        let mat = |entries: &[Pair], name: &str| -> Result<HermitianMatrix> {
            if entries.len() != n * n {
                return Err(Error::InvalidArgument(format!(
                    "{name} has {} entries, expected {}",
                    entries.len(),
                    n * n
                )));
            }
            HermitianMatrix::new(Cmat::from_row_iterator(n, n, entries.iter().map(|&p| C64::from(p))))
        };
        let nonlinearity = match doc.nonlinearity.kind {
            NonlinearityKind::None => Nonlinearity::None,
            NonlinearityKind::GalerkinPower => {
                let sigma = doc.nonlinearity.sigma.ok_or_else(|| {
                    Error::InvalidArgument("galerkin_power needs sigma".into())
                })?;
                if sigma.is_nan() || sigma <= 0.0 {
                    return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
                }
                Nonlinearity::galerkin_power(n, sigma)
            }
        };
        Self::new(mat(&doc.lambda, "lambda")?, mat(&doc.b, "b")?, doc.epsilon, nonlinearity)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc()?)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(s)?)
    }
}

/// On-disk form of [`SystemSpec`]; matrices are row-major `[re, im]` lists.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemSpecDoc {
    pub n: usize,
    pub lambda: Vec<Pair>,
    pub b: Vec<Pair>,
    pub epsilon: f64,
    pub nonlinearity: NonlinearityDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NonlinearityDoc {
    pub kind: NonlinearityKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearityKind {
    None,
    GalerkinPower,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Condition2Report {
    pub pass: bool,
    pub min_gap: f64,
    pub min_coupling: f64,
    /// `|<B e_1, e_j>|`, `j = 1..n`.
    pub couplings: Vec<f64>,
    pub reasons: Vec<String>,
}

/// Distinct spectrum of `Lambda` and `<B e_1, e_j> != 0` for every `j`,
/// both up to the given thresholds.
pub fn check_condition2(spec: &SystemSpec, tol_gap: f64, tol_coupling: f64) -> Condition2Report {
    let min_gap = spec.spectral().min_gap();
    let couplings: Vec<f64> = spec.couplings().iter().map(|c| c.norm()).collect();
    let min_coupling = couplings.iter().copied().fold(f64::INFINITY, f64::min);
    let mut reasons = Vec::new();
    if min_gap < tol_gap {
        reasons.push(format!("repeated eigenvalue: min gap {min_gap:.3e} < {tol_gap:.1e}"));
    }
    for (j, c) in couplings.iter().enumerate() {
        if *c < tol_coupling {
            reasons.push(format!("<B e_1, e_{}> = {c:.3e} below {tol_coupling:.1e}", j + 1));
        }
    }
    Condition2Report { pass: reasons.is_empty(), min_gap, min_coupling, couplings, reasons }
}

/// `Lambda = diag(1, 2)`, `B` the all-ones 2x2 matrix, `eps = 0`.
pub fn sys_a() -> SystemSpec {
    SystemSpec::new(
        HermitianMatrix::diagonal(&[1.0, 2.0]),
        HermitianMatrix::from_real_rows(&[&[1.0, 1.0], &[1.0, 1.0]]).expect("symmetric"),
        0.0,
        Nonlinearity::None,
    )
    .expect("valid fixture")
}

/// The `n = 3` Galerkin system with potential `x^2`, `sigma = 2`, `eps = 0`.
pub fn sys_b() -> SystemSpec {
    crate::galerkin::build(&crate::galerkin::PolynomialPotential::monomial(2), 3, 2.0, 0.0)
        .expect("valid fixture")
        .spec
}
