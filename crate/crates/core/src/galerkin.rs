//! Galerkin truncation of `i u_t = -u'' + beta(t) V(x) u + eps |u|^sigma u`
//! on `(0, 1)` with Dirichlet conditions, in the basis
//! `e_j(x) = sqrt(2) sin(j pi x)`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cmat, Cvec, HermitianMatrix};
use crate::quadrature::{Rule, GL_NODES};
use crate::system::{check_condition2, Condition2Report, Nonlinearity, SystemSpec};

/// Interior collocation points used for the power nonlinearity.
pub const GRID_POINTS: usize = 512;

/// Real polynomial `sum_k c_k x^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialPotential {
    coeffs: Vec<f64>,
}

impl PolynomialPotential {
    pub fn new(mut coeffs: Vec<f64>) -> Self {
        while coeffs.len() > 1 && coeffs.last() == Some(&0.0) {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        Self { coeffs }
    }

    pub fn monomial(k: usize) -> Self {
        let mut c = vec![0.0; k + 1];
        c[k] = 1.0;
        Self::new(c)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![c])
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    /// Member of the class of polynomials of degree at least 2.
    pub fn is_admissible(&self) -> bool {
        self.degree() >= 2
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    /// `self + c`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut coeffs = self.coeffs.clone();
        coeffs[0] += c;
        Self::new(coeffs)
    }
}

impl fmt::Display for PolynomialPotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, &c) in self.coeffs.iter().enumerate().rev() {
            if c == 0.0 && !(first && k == 0) {
                continue;
            }
            if !first {
                f.write_str(if c < 0.0 { " - " } else { " + " })?;
            } else if c < 0.0 {
                f.write_str("-")?;
            }
            let a = c.abs();
            match k {
                0 => write!(f, "{a}")?,
                1 if a == 1.0 => f.write_str("x")?,
                1 => write!(f, "{a}x")?,
                _ if a == 1.0 => write!(f, "x^{k}")?,
                _ => write!(f, "{a}x^{k}")?,
            }
            first = false;
        }
        Ok(())
    }
}

/// Parses sums of terms like `x^2`, `-0.5x`, `3*x^4`, `1.25`.
impl FromStr for PolynomialPotential {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse polynomial '{s}'"));
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Err(bad());
        }
        let mut terms = Vec::new();
        let mut start = 0;
        let bytes = compact.as_bytes();
        for i in 1..bytes.len() {
            let prev = bytes[i - 1];
            if (bytes[i] == b'+' || bytes[i] == b'-') && prev != b'e' && prev != b'E' && prev != b'^' {
                terms.push(&compact[start..i]);
                start = i;
            }
        }
        terms.push(&compact[start..]);
        let mut coeffs = vec![0.0; 1];
        for term in terms {
            let (sign, body) = match term.as_bytes().first() {
                Some(b'-') => (-1.0, &term[1..]),
                Some(b'+') => (1.0, &term[1..]),
                _ => (1.0, term),
            };
            let (coef, power) = match body.find('x') {
                None => (body.parse::<f64>().map_err(|_| bad())?, 0usize),
                Some(pos) => {
                    let head = body[..pos].trim_end_matches('*');
                    let coef = if head.is_empty() { 1.0 } else { head.parse::<f64>().map_err(|_| bad())? };
                    let tail = &body[pos + 1..];
                    let power = if tail.is_empty() {
                        1
                    } else {
                        tail.strip_prefix('^').ok_or_else(bad)?.parse::<usize>().map_err(|_| bad())?
                    };
                    (coef, power)
                }
            };
            if coeffs.len() <= power {
                coeffs.resize(power + 1, 0.0);
            }
            coeffs[power] += sign * coef;
        }
        Ok(Self::new(coeffs))
    }
}

pub fn dirichlet_mode(j: usize, x: f64) -> f64 {
    SQRT_2 * (j as f64 * PI * x).sin()
}

/// `<V e_i, e_j>` for 1-based mode indices.
pub fn matrix_element(v: &PolynomialPotential, i: usize, j: usize) -> f64 {
    matrix_element_with_nodes(v, i, j, GL_NODES.max(4 * (v.degree() + i + j)))
}

pub fn matrix_element_with_nodes(v: &PolynomialPotential, i: usize, j: usize, nodes: usize) -> f64 {
    let omega = (i + j) as f64 * PI;
    let panels = (omega / 16.0).ceil().max(1.0) as usize;
    let rule = Rule::composite(nodes, panels);
    rule.integrate(|x| v.eval(x) * dirichlet_mode(i, x) * dirichlet_mode(j, x))
}

/// `P_n(|z|^sigma z)` by collocation on a uniform interior grid.
#[derive(Debug, Clone)]
pub struct PowerNonlinearity {
    n: usize,
    sigma: f64,
    weight: f64,
    /// `modes[m * n + j] = e_{j+1}(x_m)`
    modes: Vec<f64>,
    /// For `sigma = 2`: grid sums of `e_j e_a e_b e_c`, index `((j n + a) n + b) n + c`.
    cubic: Option<Vec<f64>>,
}

impl PowerNonlinearity {
    pub fn new(n: usize, sigma: f64) -> Self {
        Self::with_grid(n, sigma, GRID_POINTS)
    }

    pub fn with_grid(n: usize, sigma: f64, points: usize) -> Self {
        let h = 1.0 / (points + 1) as f64;
        let mut modes = Vec::with_capacity(points * n);
        for m in 1..=points {
            let x = m as f64 * h;
            for j in 1..=n {
                modes.push(dirichlet_mode(j, x));
            }
        }
        let cubic = (sigma == 2.0 && n <= 8).then(|| {
            let mut t = vec![0.0; n * n * n * n];
            for row in modes.chunks_exact(n) {
                for (idx, tv) in t.iter_mut().enumerate() {
                    let (j, a, b, c) = (idx / (n * n * n), idx / (n * n) % n, idx / n % n, idx % n);
                    *tv += h * row[j] * row[a] * row[b] * row[c];
                }
            }
            t
        });
        Self { n, sigma, weight: h, modes, cubic }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn grid_points(&self) -> usize {
        self.modes.len() / self.n
    }

    /// Analytic at the origin only for even integer `sigma`.
    pub fn is_analytic(&self) -> bool {
        self.sigma.fract() == 0.0 && (self.sigma as i64) % 2 == 0
    }

    pub fn eval(&self, z: &Cvec) -> Cvec {
        let n = self.n;
        if let Some(t) = &self.cubic {
            return self.eval_cubic(t, z);
        }
        let mut out = vec![C64::new(0.0, 0.0); n];
        for row in self.modes.chunks_exact(n) {
            let mut u = C64::new(0.0, 0.0);
            for (zj, ej) in z.iter().zip(row) {
                u += zj * *ej;
            }
            let m2 = u.norm_sqr();
            if m2 == 0.0 {
                continue;
            }
            let mult = if self.sigma == 2.0 { m2 } else { m2.powf(0.5 * self.sigma) };
            let g = u * (mult * self.weight);
            for (o, ej) in out.iter_mut().zip(row) {
                *o += g * *ej;
            }
        }
        Cvec::from_vec(out)
    }

    /// `F_j = sum T_jabc z_a conj(z_b) z_c`, identical to the grid sum for `|u|^2 u`.
    fn eval_cubic(&self, t: &[f64], z: &Cvec) -> Cvec {
        let n = self.n;
        let mut out = Cvec::zeros(n);
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    let zab = z[a] * z[b].conj();
                    let base = ((j * n + a) * n + b) * n;
                    let mut inner = C64::new(0.0, 0.0);
                    for c in 0..n {
                        inner += z[c] * t[base + c];
                    }
                    acc += zab * inner;
                }
            }
            *o = acc;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GalerkinSystem {
    pub n: usize,
    pub sigma: f64,
    pub potential: PolynomialPotential,
    pub grid_points: usize,
    pub spec: SystemSpec,
}

pub fn build(v: &PolynomialPotential, n: usize, sigma: f64, epsilon: f64) -> Result<GalerkinSystem> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("mode count {n} < 2")));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let lambda: Vec<f64> = (1..=n).map(|j| (j as f64 * PI).powi(2)).collect();
    let mut b = Cmat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v_ij = matrix_element(v, i + 1, j + 1);
            b[(i, j)] = C64::new(v_ij, 0.0);
            b[(j, i)] = C64::new(v_ij, 0.0);
        }
    }
    let spec = SystemSpec::new(
        HermitianMatrix::diagonal(&lambda),
        HermitianMatrix::new(b)?,
        epsilon,
        Nonlinearity::galerkin_power(n, sigma),
    )?;
    Ok(GalerkinSystem { n, sigma, potential: v.clone(), grid_points: GRID_POINTS, spec })
}

pub fn nonlinearity_eval(system: &GalerkinSystem, z: &Cvec) -> Cvec {
    system.spec.nonlinearity().eval(z)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GalerkinConditionReport {
    pub potential: String,
    pub n: usize,
    pub condition: Condition2Report,
    /// `min_j |<V e_1, e_j>|`
    pub min_coupling: f64,
    pub gap_pass: bool,
    pub notes: Vec<String>,
}

pub fn condition_check(v: &PolynomialPotential, n: usize) -> Result<GalerkinConditionReport> {
    let system = build(v, n, 2.0, 0.0)?;
    let condition = check_condition2(
        &system.spec,
        crate::system::DEFAULT_TOL_GAP,
        crate::system::DEFAULT_TOL_COUPLING,
    );
    let gap_pass = condition.min_gap >= crate::system::DEFAULT_TOL_GAP;
    let mut notes = Vec::new();
    if !v.is_admissible() {
        notes.push(format!("potential has degree {} < 2", v.degree()));
    }
    Ok(GalerkinConditionReport {
        potential: v.to_string(),
        n,
        min_coupling: condition.min_coupling,
        gap_pass,
        condition,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{basis_vector, inner, random_sphere_point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `int_0^1 x^2 cos(k x) dx` from the antiderivative.
    fn x2_cos(k: f64) -> f64 {
        k.sin() / k + 2.0 * k.cos() / (k * k) - 2.0 * k.sin() / k.powi(3)
    }

    #[test]
    fn cubic_tensor_matches_grid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 2..=4 {
            let fast = PowerNonlinearity::new(n, 2.0);
            let grid = PowerNonlinearity { cubic: None, ..fast.clone() };
            for _ in 0..10 {
                let z = random_sphere_point(n, &mut rng) * C64::new(rng.random_range(0.1..3.0), 0.0);
                let d = (fast.eval(&z) - grid.eval(&z)).norm();
                assert!(d < 1e-13 * grid.eval(&z).norm().max(1.0), "n = {n}: {d}");
            }
        }
    }

    #[test]
    fn constant_potential_is_identity() {
        let one = PolynomialPotential::constant(1.0);
        for i in 1..=6 {
            for j in 1..=6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((matrix_element(&one, i, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn x_squared_elements_match_antiderivative() {
        let v = PolynomialPotential::monomial(2);
        // 2 sin(a) sin(b) = cos(a - b) - cos(a + b)
        let e11 = 1.0 / 3.0 - x2_cos(2.0 * PI);
        let e12 = x2_cos(PI) - x2_cos(3.0 * PI);
        assert!((e11 - (1.0 / 3.0 - 1.0 / (2.0 * PI * PI))).abs() < 1e-14);
        assert!((e12 + 16.0 / (9.0 * PI * PI)).abs() < 1e-14);
        for nodes in [64, 128] {
            assert!((matrix_element_with_nodes(&v, 1, 1, nodes) - e11).abs() < 1e-12);
            assert!((matrix_element_with_nodes(&v, 1, 2, nodes) - e12).abs() < 1e-12);
        }
        assert!((matrix_element(&v, 1, 1) - 0.282672).abs() < 1e-6);
        assert!((matrix_element(&v, 1, 2) + 0.180127).abs() < 1e-6);
    }

    #[test]
    fn elements_symmetric_and_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for deg in 2..=6 {
            let v = PolynomialPotential::new((0..=deg).map(|_| rng.random_range(-1.0..1.0)).collect());
            for i in 1..=8 {
                for j in 1..=8 {
                    let a = matrix_element(&v, i, j);
                    assert!((a - matrix_element(&v, j, i)).abs() < 1e-12);
                    let nodes = GL_NODES.max(4 * (v.degree() + i + j));
                    assert!((a - matrix_element_with_nodes(&v, i, j, 2 * nodes)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn spectrum_of_three_modes() {
        let g = build(&PolynomialPotential::monomial(2), 3, 2.0, 0.0).unwrap();
        let l = &g.spec.spectral().eigenvalues;
        for (j, lj) in l.iter().enumerate() {
            assert!((lj - ((j + 1) as f64 * PI).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn nonlinearity_oracles() {
        let g = build(&PolynomialPotential::monomial(2), 3, 2.0, 0.0).unwrap();
        assert_eq!(nonlinearity_eval(&g, &Cvec::zeros(3)), Cvec::zeros(3));
        // int 4 sin^4(pi x) dx = 3/2
        let f = nonlinearity_eval(&g, &basis_vector(3, 0));
        assert!((f[0].re - 1.5).abs() < 1e-12, "{}", f[0]);
        assert!(f[0].im.abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let z = random_sphere_point(3, &mut rng) * C64::new(rng.random_range(0.1..2.0), 0.0);
            let fz = nonlinearity_eval(&g, &z);
            assert!(inner(&fz, &z).im.abs() <= 1e-10);
            let th: f64 = rng.random_range(-PI..PI);
            let ph = C64::from_polar(1.0, th);
            let rotated = nonlinearity_eval(&g, &(&z * ph));
            assert!((rotated - fz * ph).norm() <= 1e-12);
        }
    }

    #[test]
    fn genericity_witness() {
        for n in 2..=8 {
            assert!(condition_check(&PolynomialPotential::monomial(2), n).unwrap().condition.pass, "n = {n}");
        }
        let r = condition_check(&PolynomialPotential::constant(0.0), 3).unwrap();
        assert!(!r.condition.pass);
        assert_eq!(r.min_coupling, 0.0);
        let c_star = 1.0 / 3.0 - 1.0 / (2.0 * PI * PI);
        let r = condition_check(&PolynomialPotential::monomial(2).shifted(-c_star), 4).unwrap();
        assert!(!r.condition.pass);
        assert!(r.condition.couplings[0] < 1e-12);
    }

    #[test]
    fn parses_polynomials() {
        let p: PolynomialPotential = "x^2".parse().unwrap();
        assert_eq!(p.coeffs(), &[0.0, 0.0, 1.0]);
        let p: PolynomialPotential = "1.5 - 2x + 3*x^3".parse().unwrap();
        assert_eq!(p.coeffs(), &[1.5, -2.0, 0.0, 3.0]);
        let p: PolynomialPotential = "-x^2 + 1e-3".parse().unwrap();
        assert_eq!(p.coeffs(), &[1e-3, 0.0, -1.0]);
        assert!("x^".parse::<PolynomialPotential>().is_err());
        assert_eq!(PolynomialPotential::new(vec![1.0, 0.0, -2.0]).to_string(), "-2x^2 + 1");
    }
}
