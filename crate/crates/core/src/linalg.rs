//! Complex linear algebra at small fixed dimension and sphere geometry.
//!
//! Inner products follow the physics-free convention `<x, y> = sum x_j conj(y_j)`
//! (linear in the first slot), so `<B e_1, e_k>` is the `k`-th coordinate of
//! `B e_1` in the eigenbasis.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Cvec = DVector<C64>;
pub type Cmat = DMatrix<C64>;

/// Tolerance on `| ||z|| - 1 |` for a vector to count as on the unit sphere.
pub const SPHERE_TOL: f64 = 1e-12;
const HERMITIAN_TOL: f64 = 1e-14;

pub fn inner(x: &Cvec, y: &Cvec) -> C64 {
    x.iter().zip(y.iter()).map(|(a, b)| a * b.conj()).sum()
}

pub fn norm(x: &Cvec) -> f64 {
    x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

pub fn distance(x: &Cvec, y: &Cvec) -> f64 {
    x.iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

pub fn is_on_sphere(z: &Cvec) -> bool {
    (norm(z) - 1.0).abs() <= SPHERE_TOL
}

pub fn basis_vector(n: usize, k: usize) -> Cvec {
    let mut v = Cvec::zeros(n);
    v[k] = C64::new(1.0, 0.0);
    v
}

pub fn from_parts(parts: &[(f64, f64)]) -> Cvec {
    Cvec::from_iterator(parts.len(), parts.iter().map(|&(re, im)| C64::new(re, im)))
}

pub fn conj(z: &Cvec) -> Cvec {
    z.map(|c| c.conj())
}

/// `z / ||z||`. Logs the drift of the input norm from 1.
pub fn sphere_renormalize(z: &Cvec) -> Result<Cvec> {
    let r = norm(z);
    if r <= 1e-300 {
        return Err(Error::ZeroVector);
    }
    log::trace!("renormalize: norm drift {:.3e}", (r - 1.0).abs());
    Ok(z.unscale(r))
}

/// Distance from `z` to the circle `{e_1 e^{it}}`, `sqrt(2 - 2 |<z, e_1>|)`.
pub fn dist_to_circle(z: &Cvec, e1: &Cvec) -> f64 {
    let overlap = inner(z, e1).norm().min(1.0);
    (2.0 - 2.0 * overlap).max(0.0).sqrt()
}

/// Uniformly distributed point on the unit sphere of `C^n`.
pub fn random_sphere_point<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Cvec {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let v = Cvec::from_iterator(
            n,
            (0..n).map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                C64::new(re, im)
            }),
        );
        if let Ok(u) = sphere_renormalize(&v) {
            return u;
        }
    }
}

/// Unit vector in the real tangent space `{x : Re<x, y> = 0}` at `y`, uniformly
/// distributed in direction.
pub fn random_tangent<R: rand::Rng + ?Sized>(y: &Cvec, rng: &mut R) -> Cvec {
    loop {
        let v = random_sphere_point(y.len(), rng);
        let t = &v - y * C64::new(inner(&v, y).re, 0.0);
        if let Ok(u) = sphere_renormalize(&t) {
            return u;
        }
    }
}

/// Point on the sphere at chord distance `r` (< 2) from the unit vector `y`
/// along the tangent direction `v`.
pub fn geodesic_point(y: &Cvec, v: &Cvec, r: f64) -> Cvec {
    let theta = 2.0 * (r / 2.0).clamp(-1.0, 1.0).asin();
    y * C64::new(theta.cos(), 0.0) + v * C64::new(theta.sin(), 0.0)
}

/// A complex matrix equal to its conjugate transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(Cmat);

impl HermitianMatrix {
    pub fn new(m: Cmat) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
        }
        let scale = m.iter().map(|c| c.norm()).fold(1.0, f64::max);
        let asymmetry = asymmetry(&m);
        if asymmetry > HERMITIAN_TOL * scale {
            return Err(Error::NonHermitianInput { asymmetry });
        }
        Ok(Self(m))
    }

    pub fn from_real_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        let m = Cmat::from_fn(n, n, |i, j| C64::new(rows[i][j], 0.0));
        Self::new(m)
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        Self(Cmat::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(values[i], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        }))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Cmat {
        &self.0
    }

    pub fn into_inner(self) -> Cmat {
        self.0
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_real(&self, tol: f64) -> bool {
        self.0.iter().all(|c| c.im.abs() <= tol)
    }

    /// `U H U*` for unitary `U`.
    pub fn conjugated(&self, u: &Cmat) -> Self {
        let m = u * &self.0 * u.adjoint();
        // symmetrize away roundoff
        let m = (&m + m.adjoint()).unscale(2.0);
        Self(m)
    }

    pub fn apply(&self, z: &Cvec) -> Cvec {
        &self.0 * z
    }
}

fn asymmetry(m: &Cmat) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Ascending eigenvalues with orthonormal, phase-normalized eigenvectors.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Cvec>,
}

impl SpectralData {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn e(&self, k: usize) -> &Cvec {
        &self.eigenvectors[k]
    }

    /// Coordinates `<z, e_k>`.
    pub fn coordinates(&self, z: &Cvec) -> Vec<C64> {
        self.eigenvectors.iter().map(|e| inner(z, e)).collect()
    }

    pub fn from_coordinates(&self, c: &[C64]) -> Cvec {
        let mut z = Cvec::zeros(self.dim());
        for (ck, e) in c.iter().zip(&self.eigenvectors) {
            z += e * *ck;
        }
        z
    }

    /// `exp(-i H t) z` for the decomposed matrix `H`.
    pub fn evolve(&self, z: &Cvec, t: f64) -> Cvec {
        let c: Vec<C64> = self
            .coordinates(z)
            .into_iter()
            .zip(&self.eigenvalues)
            .map(|(ck, &l)| ck * C64::from_polar(1.0, -l * t))
            .collect();
        self.from_coordinates(&c)
    }

    pub fn reconstruct(&self) -> Cmat {
        let n = self.dim();
        let mut m = Cmat::zeros(n, n);
        for (l, e) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            m += (e * e.adjoint()).scale(*l);
        }
        m
    }

    pub fn min_gap(&self) -> f64 {
        self.eigenvalues
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn eigendecompose(h: &HermitianMatrix) -> Result<SpectralData> {
    // Re-validate: the newtype may have been built before a tolerance change.
    let m = h.matrix().clone();
    let scale = m.iter().map(|c| c.norm()).fold(1.0, f64::max);
    let asym = asymmetry(&m);
    if asym > HERMITIAN_TOL * scale {
        return Err(Error::NonHermitianInput { asymmetry: asym });
    }
    let n = m.nrows();
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let eigenvectors = order
        .iter()
        .map(|&k| phase_normalize(eig.eigenvectors.column(k).into_owned()))
        .collect();
    Ok(SpectralData { eigenvalues, eigenvectors })
}

/// Rotate the phase so the largest-modulus entry (lowest index on ties) is
/// real and positive.
fn phase_normalize(v: Cvec) -> Cvec {
    let mut best = 0;
    let mut best_mod = -1.0;
    for (i, c) in v.iter().enumerate() {
        // ties within roundoff go to the lower index
        if c.norm() > best_mod * (1.0 + 1e-12) {
            best = i;
            best_mod = c.norm();
        }
    }
    let phase = v[best] / v[best].norm();
    let r = norm(&v);
    v.map(|c| c * phase.conj() / r)
}

/// In-place `z <- exp(-i h H) z` for a 2x2 Hermitian `H` given by its
/// entries `[[a, b], [conj(b), d]]`.
#[inline]
pub(crate) fn expm_apply_2x2(a: f64, b: C64, d: f64, h: f64, z: &mut [C64]) {
    let m = 0.5 * (a + d);
    let p = 0.5 * (a - d);
    let r = (p * p + b.norm_sqr()).sqrt();
    let (s, c) = (h * r).sin_cos();
    let sinc = if r > 1e-300 { s / r } else { h };
    let global = C64::from_polar(1.0, -h * m);
    let mi = C64::new(0.0, -sinc);
    let z0 = z[0];
    let z1 = z[1];
    let n0 = z0 * c + mi * (z0 * p + b * z1);
    let n1 = z1 * c + mi * (b.conj() * z0 - z1 * p);
    z[0] = global * n0;
    z[1] = global * n1;
}

/// `exp(-i h H) z` for general Hermitian `H` through its eigendecomposition.
pub(crate) fn expm_apply(hm: &Cmat, h: f64, z: &Cvec) -> Cvec {
    let eig = nalgebra::SymmetricEigen::new(hm.clone());
    let v = &eig.eigenvectors;
    let mut c = v.adjoint() * z;
    for (ck, l) in c.iter_mut().zip(eig.eigenvalues.iter()) {
        *ck *= C64::from_polar(1.0, -l * h);
    }
    v * c
}

/// `[re, im]` pairs, the JSON encoding of complex numbers used throughout.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Pair(pub f64, pub f64);

impl From<C64> for Pair {
    fn from(c: C64) -> Self {
        Pair(c.re, c.im)
    }
}

impl From<Pair> for C64 {
    fn from(p: Pair) -> Self {
        C64::new(p.0, p.1)
    }
}

pub fn to_pairs(z: &Cvec) -> Vec<Pair> {
    z.iter().map(|&c| c.into()).collect()
}

pub fn from_pair_vec(p: &[Pair]) -> Cvec {
    Cvec::from_iterator(p.len(), p.iter().map(|&q| q.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> HermitianMatrix {
        use rand::Rng;
        let a = Cmat::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        HermitianMatrix::new((&a + a.adjoint()).unscale(2.0)).unwrap()
    }

    #[test]
    fn identity_eigenpairs() {
        let s = eigendecompose(&HermitianMatrix::diagonal(&[1.0, 1.0])).unwrap();
        assert_eq!(s.eigenvalues, vec![1.0, 1.0]);
        let g = inner(s.e(0), s.e(1));
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn diagonal_gives_standard_basis() {
        let s = eigendecompose(&HermitianMatrix::diagonal(&[2.0, 1.0])).unwrap();
        assert_eq!(s.eigenvalues, vec![1.0, 2.0]);
        assert!(distance(s.e(0), &basis_vector(2, 1)) < 1e-15);
        assert!(distance(s.e(1), &basis_vector(2, 0)) < 1e-15);
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=8 {
            for _ in 0..20 {
                let h = random_hermitian(n, &mut rng);
                let s = eigendecompose(&h).unwrap();
                let resid = (s.reconstruct() - h.matrix()).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                assert!(resid <= 1e-12 * h.frobenius());
                for i in 0..n {
                    for j in 0..n {
                        let d = if i == j { 1.0 } else { 0.0 };
                        assert!((inner(s.e(i), s.e(j)) - d).norm() <= 1e-12);
                    }
                }
                assert!(s.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn phase_normalization_is_real_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = eigendecompose(&random_hermitian(4, &mut rng)).unwrap();
        for e in &s.eigenvectors {
            let big = e.iter().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap();
            assert!(big.im.abs() < 1e-15 && big.re > 0.0);
        }
    }

    #[test]
    fn rejects_non_hermitian() {
        let m = Cmat::from_row_slice(2, 2, &[C64::new(1.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0)]);
        assert!(matches!(HermitianMatrix::new(m), Err(Error::NonHermitianInput { .. })));
    }

    #[test]
    fn circle_distance_examples() {
        let e1 = basis_vector(2, 0);
        assert_eq!(dist_to_circle(&e1, &e1), 0.0);
        let rotated = &e1 * C64::from_polar(1.0, 0.7);
        assert!(dist_to_circle(&rotated, &e1) < 1e-15);
        let e2 = basis_vector(2, 1);
        assert!((dist_to_circle(&e2, &e1) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn renormalize_examples() {
        let e1 = basis_vector(2, 0);
        assert_eq!(sphere_renormalize(&e1).unwrap(), e1);
        assert_eq!(sphere_renormalize(&(&e1 * C64::new(2.0, 0.0))).unwrap(), e1);
        let v = sphere_renormalize(&from_parts(&[(1.0, 0.0), (1.0, 0.0)])).unwrap();
        assert!((v[0].re - 1.0 / 2f64.sqrt()).abs() < 1e-16);
        assert_eq!(sphere_renormalize(&Cvec::zeros(2)), Err(Error::ZeroVector));
    }

    #[test]
    fn closed_form_2x2_matches_eigen_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h = random_hermitian(2, &mut rng);
            let m = h.matrix();
            let z = random_sphere_point(2, &mut rng);
            let mut fast = [z[0], z[1]];
            expm_apply_2x2(m[(0, 0)].re, m[(0, 1)], m[(1, 1)].re, 0.37, &mut fast);
            let slow = expm_apply(m, 0.37, &z);
            assert!((fast[0] - slow[0]).norm() < 1e-14 && (fast[1] - slow[1]).norm() < 1e-14);
        }
    }

    proptest::proptest! {
        #[test]
        fn circle_distance_phase_invariant(seed in 0u64..10_000, theta in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 2 + (seed % 4) as usize;
            let z = random_sphere_point(n, &mut rng);
            let e1 = basis_vector(n, 0);
            let rot = &z * C64::from_polar(1.0, theta);
            proptest::prop_assert!((dist_to_circle(&rot, &e1) - dist_to_circle(&z, &e1)).abs() <= 1e-14);
        }
    }
}
