//! Composite Gauss–Legendre quadrature for matrix-valued integrands.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::matcore::{frobenius_norm, CMatrix, C64};

/// Gauss–Legendre nodes and weights on [-1, 1].
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        let n = order as f64;
        for i in 0..order.div_ceil(2) {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(order, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(order, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[order - 1 - i] = x;
            weights[i] = w;
            weights[order - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Fixed composite rule with `panels` equal panels.
    pub fn integrate_panels<F>(&self, f: &F, a: f64, b: f64, panels: usize) -> Result<CMatrix>
    where
        F: Fn(f64) -> Result<CMatrix>,
    {
        Ok(self.integrate_with_mass(f, a, b, panels)?.0)
    }

    /// The rule together with `Σ|wᵢ|·‖f(tᵢ)‖_F`, the scale of its rounding.
    fn integrate_with_mass<F>(&self, f: &F, a: f64, b: f64, panels: usize) -> Result<(CMatrix, f64)>
    where
        F: Fn(f64) -> Result<CMatrix>,
    {
        let h = (b - a) / panels as f64;
        let mut acc: Option<CMatrix> = None;
        let mut mass = 0.0;
        for p in 0..panels {
            let lo = a + p as f64 * h;
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                let t = lo + 0.5 * h * (x + 1.0);
                let v = f(t)? * C64::new(0.5 * h * w, 0.0);
                mass += frobenius_norm(&v);
                match acc.as_mut() {
                    Some(s) => *s += v,
                    None => acc = Some(v),
                }
            }
        }
        let acc = acc.ok_or_else(|| Error::InvalidConfig("empty quadrature".into()))?;
        Ok((acc, mass))
    }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

const ROUNDING_FACTOR: f64 = 64.0;

/// Adaptive composite rule: doubles the panel count until two successive
/// refinements agree within `rel_tol · scale`.
#[derive(Clone, Debug)]
pub struct Quadrature {
    rule: GaussLegendre,
    rel_tol: f64,
    max_panels: usize,
}

#[derive(Clone, Debug)]
pub struct QuadratureResult {
    pub value: CMatrix,
    pub error_estimate: f64,
    pub panels: usize,
}

impl Quadrature {
    pub const DEFAULT_ORDER: usize = 8;
    pub const DEFAULT_REL_TOL: f64 = 1e-12;

    pub fn new(order: usize, rel_tol: f64) -> Self {
        Self {
            rule: GaussLegendre::new(order),
            rel_tol,
            max_panels: 1 << 16,
        }
    }

    pub fn order(&self) -> usize {
        self.rule.order()
    }

    pub fn rel_tol(&self) -> f64 {
        self.rel_tol
    }

    /// Integrates `f` over `[a, b]`.
    ///
    /// `max_frequency` bounds the angular frequencies present in `f` and sets
    /// the initial panel width; `scale` is the magnitude against which the
    /// tolerance is measured (typically `sup‖f‖·(b − a)`).
    pub fn integrate<F>(&self, f: F, a: f64, b: f64, max_frequency: f64, scale: f64) -> Result<QuadratureResult>
    where
        F: Fn(f64) -> Result<CMatrix>,
    {
        let len = b - a;
        if !(len.is_finite() && len >= 0.0) {
            return Err(Error::NumericDomain(format!("bad quadrature interval [{a}, {b}]")));
        }
        if len == 0.0 {
            let z = f(a)? * C64::new(0.0, 0.0);
            return Ok(QuadratureResult {
                value: z,
                error_estimate: 0.0,
                panels: 0,
            });
        }
        let mut panels = ((max_frequency * len / 2.0).ceil() as usize).clamp(1, self.max_panels);
        let mut coarse = self.rule.integrate_panels(&f, a, b, panels)?;
        let mut err = f64::INFINITY;
        while 2 * panels <= self.max_panels {
            let (fine, mass) = self.rule.integrate_with_mass(&f, a, b, 2 * panels)?;
            err = frobenius_norm(&(&fine - &coarse));
            panels *= 2;
            // Differences below the rounding of the sums themselves carry no
            // information, whatever the requested scale.
            let target = (self.rel_tol * scale).max(ROUNDING_FACTOR * f64::EPSILON * mass);
            if err <= target {
                return Ok(QuadratureResult {
                    value: fine,
                    error_estimate: err,
                    panels,
                });
            }
            coarse = fine;
        }
        Err(Error::QuadratureNonConvergence { a, b, achieved: err })
    }
}

impl Default for Quadrature {
    fn default() -> Self {
        Self::new(Self::DEFAULT_ORDER, Self::DEFAULT_REL_TOL)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> CMatrix {
        CMatrix::from_element(1, 1, C64::new(x, 0.0))
    }

    #[test]
    fn nodes_and_weights_are_symmetric_and_sum_to_two() {
        for order in [1, 2, 5, 8, 12] {
            let gl = GaussLegendre::new(order);
            let sum: f64 = gl.weights().iter().sum();
            assert!((sum - 2.0).abs() < 1e-14, "order {order}");
            for i in 0..order {
                assert!((gl.nodes()[i] + gl.nodes()[order - 1 - i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        let gl = GaussLegendre::new(8);
        for deg in 0..16 {
            let v = gl
                .integrate_panels(&|x: f64| Ok(scalar(x.powi(deg))), 0.0, 1.0, 1)
                .unwrap();
            assert!((v[(0, 0)].re - 1.0 / (deg as f64 + 1.0)).abs() < 1e-14, "degree {deg}");
        }
    }

    #[test]
    fn adaptive_integrates_oscillatory_exponential() {
        let q = Quadrature::default();
        let omega = 3.7;
        let f = |t: f64| Ok(CMatrix::from_element(1, 1, C64::from_polar(1.0, omega * t)));
        let r = q.integrate(f, 0.0, 40.0, omega, 40.0).unwrap();
        let exact = (C64::from_polar(1.0, omega * 40.0) - 1.0) / C64::new(0.0, omega);
        assert!((r.value[(0, 0)] - exact).norm() < 1e-11);
    }

    #[test]
    fn zero_length_interval_is_zero() {
        let q = Quadrature::default();
        let r = q.integrate(|t| Ok(scalar(t)), 2.0, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(r.value[(0, 0)], C64::new(0.0, 0.0));
    }

    #[test]
    fn non_convergence_is_reported() {
        let q = Quadrature {
            rule: GaussLegendre::new(2),
            rel_tol: 1e-15,
            max_panels: 4,
        };
        let err = q
            .integrate(|t: f64| Ok(scalar((50.0 * t).sin())), 0.0, 10.0, 0.0, 1.0)
            .unwrap_err();
        assert!(matches!(err, Error::QuadratureNonConvergence { .. }));
    }
}
