//! Gauss–Legendre quadrature on `[0, 1]`, plain and composite.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Default node count.
pub const GL_NODES: usize = 64;

#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    /// Gauss–Legendre rule with `m` nodes mapped to `[0, 1]`.
    pub fn gauss_legendre(m: usize) -> Self {
        let (x, w) = legendre_nodes(m);
        Self {
            nodes: x.iter().map(|t| 0.5 * (t + 1.0)).collect(),
            weights: w.iter().map(|w| 0.5 * w).collect(),
        }
    }

    /// `panels` equal sub-intervals of `[0, 1]`, each with an `m`-node rule.
    pub fn composite(m: usize, panels: usize) -> Self {
        let base = if m == GL_NODES { default_rule().clone() } else { Self::gauss_legendre(m) };
        let panels = panels.max(1);
        let width = 1.0 / panels as f64;
        let mut nodes = Vec::with_capacity(m * panels);
        let mut weights = Vec::with_capacity(m * panels);
        for p in 0..panels {
            let left = p as f64 * width;
            for (x, w) in base.nodes.iter().zip(&base.weights) {
                nodes.push(left + width * x);
                weights.push(width * w);
            }
        }
        Self { nodes, weights }
    }

    /// Composite 64-node rule fine enough for integrands oscillating at
    /// angular frequency up to `omega` on `[0, 1]`.
    pub fn for_bandwidth(omega: f64) -> Self {
        let panels = (omega.abs() / 16.0).ceil() as usize;
        Self::composite(GL_NODES, panels.max(1))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub fn default_rule() -> &'static Rule {
    static RULE: OnceLock<Rule> = OnceLock::new();
    RULE.get_or_init(|| Rule::gauss_legendre(GL_NODES))
}

/// Nodes and weights on `[-1, 1]` by Newton iteration on `P_m`.
fn legendre_nodes(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut t = (PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(m, t);
            dp = d;
            let dt = p / d;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(m, t);
        dp = if d != 0.0 { d } else { dp };
        x[i] = -t;
        x[m - 1 - i] = t;
        let wi = 2.0 / ((1.0 - t * t) * dp * dp);
        w[i] = wi;
        w[m - 1 - i] = wi;
    }
    (x, w)
}

fn legendre(m: usize, t: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = t;
    for k in 2..=m {
        let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = m as f64 * (t * p1 - p0) / (t * t - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        let r = default_rule();
        for p in 0..=127 {
            let exact = 1.0 / (p as f64 + 1.0);
            let got = r.integrate(|x| x.powi(p));
            assert!((got - exact).abs() < 1e-14, "degree {p}: {got} vs {exact}");
        }
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn oscillatory_integrand_with_panels() {
        let omega = 160.0;
        let r = Rule::for_bandwidth(omega);
        let got = r.integrate(|x| (omega * x).cos());
        assert!((got - omega.sin() / omega).abs() < 1e-14);
    }
}
