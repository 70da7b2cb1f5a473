//! Time-dependent hermitian generators `t ↦ A(t)`.
//!
//! Generators are evaluated lazily at whatever times the caller needs
//! (quadrature nodes, oracle midpoints); nothing is tabulated up front.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::averaging::{PiecewiseConstantGenerator, PiecewisePropagator};
use crate::error::{Error, Result};
use crate::matcore::{spectral_norm, CMatrix, HermitianMatrix, C64};

pub trait Generator: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// `A(t)`, hermitian by construction. Returned unsymmetrized so callers
    /// can measure the hermiticity defect of the construction itself.
    fn evaluate(&self, t: f64) -> Result<CMatrix>;

    /// A bound `M` with `sup_t ‖A(t)‖ ≤ M`.
    fn norm_bound(&self) -> f64;

    /// Upper bound on the angular frequencies present in `A`; sizes
    /// quadrature panels.
    fn max_frequency(&self) -> f64;

    fn evaluate_hermitian(&self, t: f64) -> Result<HermitianMatrix> {
        HermitianMatrix::with_scale(self.evaluate(t)?, self.norm_bound())
    }

    /// Times in the open interval `(t0, t1)` where `A` jumps, ascending.
    fn breakpoints(&self, _t0: f64, _t1: f64) -> Vec<f64> {
        Vec::new()
    }

    /// The term structure, when the generator has one.
    fn as_quasiperiodic(&self) -> Option<&QuasiperiodicGenerator> {
        None
    }
}

pub type SharedGenerator = Arc<dyn Generator>;

fn check_time(t: f64) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericDomain(format!("non-finite time {t}")))
    }
}

#[derive(Clone, Debug)]
pub struct ConstantGenerator {
    value: HermitianMatrix,
    norm: f64,
}

impl ConstantGenerator {
    pub fn new(value: HermitianMatrix) -> Self {
        let norm = value.norm();
        Self { value, norm }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(HermitianMatrix::zeros(dim))
    }

    pub fn value(&self) -> &HermitianMatrix {
        &self.value
    }
}

impl Generator for ConstantGenerator {
    fn dim(&self) -> usize {
        self.value.dim()
    }

    fn evaluate(&self, t: f64) -> Result<CMatrix> {
        check_time(t)?;
        Ok(self.value.matrix().clone())
    }

    fn norm_bound(&self) -> f64 {
        self.norm
    }

    fn max_frequency(&self) -> f64 {
        0.0
    }
}

/// `(e^{ix} − 1)/(ix)`, with a Taylor branch near zero.
pub(crate) fn phase_average(x: f64) -> C64 {
    if x.abs() < 1e-8 {
        C64::new(1.0 - x * x / 6.0, x / 2.0)
    } else {
        (C64::from_polar(1.0, x) - 1.0) / C64::new(0.0, x)
    }
}

/// One term `M e^{iωt}` of a quasiperiodic generator; the hermitian
/// conjugate is added by the owning generator.
#[derive(Clone, Debug, PartialEq)]
pub struct QuasiperiodicTerm {
    pub amplitude: CMatrix,
    pub omega: f64,
    /// 1-based position `j` in the series.
    pub index: usize,
}

impl QuasiperiodicTerm {
    pub fn new(amplitude: CMatrix, omega: f64, index: usize) -> Self {
        Self {
            amplitude,
            omega,
            index,
        }
    }

    pub fn amplitude_norm(&self) -> f64 {
        spectral_norm(&self.amplitude)
    }

    /// `M e^{iωt}`.
    pub fn value(&self, t: f64) -> CMatrix {
        &self.amplitude * C64::from_polar(1.0, self.omega * t)
    }

    /// Exact interval average of `M e^{iωt}` over `[nT₀, (n+1)T₀]`:
    /// `M e^{inωT₀} (e^{iωT₀} − 1)/(iωT₀)`.
    pub fn block_average(&self, t0: f64, n: usize) -> CMatrix {
        let start = n as f64 * t0;
        &self.amplitude * (C64::from_polar(1.0, self.omega * start) * phase_average(self.omega * t0))
    }

    /// `∫_{nT₀}^{t} [M e^{iωs} − B̄⁽ⁿ⁾] ds` with `n = ⌊t/T₀⌋`; earlier blocks
    /// cancel exactly.
    ///
    /// Written as `M e^{iωnT₀} τ [φ(ωτ) − φ(ωT₀)]` with `τ = t − nT₀` and
    /// `φ(x) = (e^{ix} − 1)/(ix)`, which stays accurate as `ω → 0`.
    pub fn residual_integral(&self, t0: f64, t: f64) -> CMatrix {
        let n = (t / t0).floor();
        let tau = t - n * t0;
        let start = n * t0;
        let bracket = phase_average(self.omega * tau) - phase_average(self.omega * t0);
        &self.amplitude * (C64::from_polar(1.0, self.omega * start) * bracket * tau)
    }

    /// `∫₀ᵗ M e^{iωs} ds`.
    pub fn integral(&self, t: f64) -> CMatrix {
        &self.amplitude * (phase_average(self.omega * t) * t)
    }
}

/// Free-function form of [`QuasiperiodicTerm::block_average`].
pub fn analytic_block_average(term: &QuasiperiodicTerm, t0: f64, n: usize) -> CMatrix {
    term.block_average(t0, n)
}

/// Amplitude decay law `‖Mⱼ‖ ≤ c·j^{−σ}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decay {
    pub c: f64,
    pub sigma: f64,
    /// Exponent offset for the `‖Mⱼ‖ ≤ j^{−1−δ}` convention, when used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

impl Decay {
    pub fn new(c: f64, sigma: f64) -> Self {
        Self { c, sigma, delta: None }
    }

    /// The `c = 1, σ = 1 + δ` convention.
    pub fn with_delta(delta: f64) -> Self {
        Self {
            c: 1.0,
            sigma: 1.0 + delta,
            delta: Some(delta),
        }
    }

    pub fn bound(&self, j: usize) -> f64 {
        self.c * (j as f64).powf(-self.sigma)
    }

    /// `c·Σ_{j>jmax} j^{−σ}`: explicit sum over a long stretch plus the
    /// integral bound for what remains.
    pub fn tail_bound(&self, jmax: usize) -> f64 {
        if self.sigma <= 1.0 {
            return f64::INFINITY;
        }
        const EXPLICIT: usize = 100_000;
        let explicit: f64 = (jmax + 1..=jmax + EXPLICIT).map(|j| (j as f64).powf(-self.sigma)).sum();
        let last = (jmax + EXPLICIT) as f64;
        self.c * (explicit + last.powf(1.0 - self.sigma) / (self.sigma - 1.0))
    }
}

/// `A(t) = Σⱼ (Mⱼ e^{iωⱼt} + Mⱼ† e^{−iωⱼt})`, truncated to a finite term list.
#[derive(Clone, Debug)]
pub struct QuasiperiodicGenerator {
    dim: usize,
    terms: Vec<QuasiperiodicTerm>,
    decay: Decay,
    norm_bound: f64,
}

impl QuasiperiodicGenerator {
    /// Builds the generator; with `strict` every term must satisfy the decay
    /// law at its own index.
    pub fn new(dim: usize, terms: Vec<QuasiperiodicTerm>, decay: Decay, strict: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        let mut norm_bound = 0.0;
        for term in &terms {
            if term.amplitude.nrows() != dim || term.amplitude.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: term.amplitude.nrows(),
                });
            }
            if !term.omega.is_finite() {
                return Err(Error::NumericDomain(format!(
                    "non-finite frequency in term {}",
                    term.index
                )));
            }
            let norm = term.amplitude_norm();
            if strict {
                let bound = decay.bound(term.index);
                if norm > bound * (1.0 + 1e-12) {
                    return Err(Error::DecayViolation {
                        index: term.index,
                        norm,
                        bound,
                    });
                }
            }
            norm_bound += 2.0 * norm;
        }
        Ok(Self {
            dim,
            terms,
            decay,
            norm_bound,
        })
    }

    pub fn terms(&self) -> &[QuasiperiodicTerm] {
        &self.terms
    }

    pub fn decay(&self) -> Decay {
        self.decay
    }

    /// Tail bound of the truncated infinite series past the largest index.
    pub fn truncation_tail_bound(&self) -> f64 {
        let jmax = self.terms.iter().map(|t| t.index).max().unwrap_or(0);
        self.decay.tail_bound(jmax)
    }

    fn sum_with<F>(&self, f: F) -> CMatrix
    where
        F: Fn(&QuasiperiodicTerm) -> CMatrix,
    {
        let mut x = CMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            x += f(term);
        }
        &x + x.adjoint()
    }

    /// Closed-form block average `Ā⁽ⁿ⁾` summed over all terms.
    pub fn analytic_block_average(&self, t0: f64, n: usize) -> CMatrix {
        self.sum_with(|term| term.block_average(t0, n))
    }

    /// Closed-form `∫₀ᵗ (A − Āᵍ)`.
    pub fn analytic_residual_integral(&self, t0: f64, t: f64) -> CMatrix {
        self.sum_with(|term| term.residual_integral(t0, t))
    }

    /// Closed-form `∫₀ᵗ A`.
    pub fn analytic_integral(&self, t: f64) -> CMatrix {
        self.sum_with(|term| term.integral(t))
    }

    fn with_terms(&self, terms: Vec<QuasiperiodicTerm>) -> Self {
        let norm_bound = terms.iter().map(|t| 2.0 * t.amplitude_norm()).sum();
        Self {
            dim: self.dim,
            terms,
            decay: self.decay,
            norm_bound,
        }
    }
}

impl Generator for QuasiperiodicGenerator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, t: f64) -> Result<CMatrix> {
        check_time(t)?;
        let mut x = CMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            let phase = C64::from_polar(1.0, term.omega * t);
            x.zip_apply(&term.amplitude, |a, m| *a += m * phase);
        }
        let n = self.dim;
        for j in 0..n {
            x[(j, j)] = C64::new(2.0 * x[(j, j)].re, 0.0);
            for i in j + 1..n {
                let s = x[(i, j)] + x[(j, i)].conj();
                x[(i, j)] = s;
                x[(j, i)] = s.conj();
            }
        }
        Ok(x)
    }

    fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    fn max_frequency(&self) -> f64 {
        self.terms.iter().map(|t| t.omega.abs()).fold(0.0, f64::max)
    }

    fn as_quasiperiodic(&self) -> Option<&QuasiperiodicGenerator> {
        Some(self)
    }
}

/// Threshold for the slow/fast partition: a term is slow when `|ω|·T₀ < θ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    theta: f64,
    t0: f64,
}

impl SplitConfig {
    pub const DEFAULT_THETA: f64 = 0.1;

    pub fn new(theta: f64, t0: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::InvalidConfig(format!("split threshold {theta} outside (0, 1)")));
        }
        if !(t0 > 0.0 && t0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "averaging interval {t0} must be positive"
            )));
        }
        Ok(Self { theta, t0 })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn is_slow(&self, omega: f64) -> bool {
        omega.abs() * self.t0 < self.theta
    }
}

/// Partitions the terms into `(slow, fast)`.
///
/// The slow part collects `ωⱼT₀ < θ`; in the series notation this is the
/// high-index tail `A^>` and the fast part is `A^<`.
pub fn split_frequencies(
    gen: &QuasiperiodicGenerator,
    cfg: &SplitConfig,
) -> (QuasiperiodicGenerator, QuasiperiodicGenerator) {
    let (slow, fast): (Vec<_>, Vec<_>) = gen.terms.iter().cloned().partition(|t| cfg.is_slow(t.omega));
    (gen.with_terms(slow), gen.with_terms(fast))
}

/// `Aₙ₊₁(t) = U⁻¹(t)[Aₙ(t) − Āₙᵍ(t)]U(t)`.
#[derive(Clone, Debug)]
pub struct PeeledGenerator {
    base: SharedGenerator,
    propagator: Arc<PiecewisePropagator>,
    averaged: Arc<PiecewiseConstantGenerator>,
    norm_bound: f64,
    max_frequency: f64,
}

pub fn peeled_generator(
    base: SharedGenerator,
    propagator: Arc<PiecewisePropagator>,
    averaged: Arc<PiecewiseConstantGenerator>,
) -> Result<PeeledGenerator> {
    if base.dim() != averaged.dim() {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            found: averaged.dim(),
        });
    }
    if propagator.dim() != averaged.dim() {
        return Err(Error::DimensionMismatch {
            expected: averaged.dim(),
            found: propagator.dim(),
        });
    }
    if (propagator.t0() - averaged.t0()).abs() > 1e-12 * averaged.t0() {
        return Err(Error::InvalidConfig("propagator and averages use different T0".into()));
    }
    let avg_max = averaged.max_norm();
    // Block averages never exceed sup‖A‖, so this is ≤ 2·base bound.
    let norm_bound = base.norm_bound() + avg_max.min(base.norm_bound());
    // U(t) contributes phases at eigenvalue differences of βĀ.
    let max_frequency = base.max_frequency() + 2.0 * propagator.beta() * avg_max;
    Ok(PeeledGenerator {
        base,
        propagator,
        averaged,
        norm_bound,
        max_frequency,
    })
}

impl PeeledGenerator {
    pub fn base(&self) -> &SharedGenerator {
        &self.base
    }
}

impl Generator for PeeledGenerator {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn evaluate(&self, t: f64) -> Result<CMatrix> {
        let diff = self.base.evaluate(t)? - self.averaged.value_at(t)?.matrix();
        let u = self.propagator.at(t)?;
        let u_inv = self.propagator.inverse_at(t)?;
        Ok(u_inv.matrix() * diff * u.matrix())
    }

    fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    fn max_frequency(&self) -> f64 {
        self.max_frequency
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        merge_breakpoints(self.base.breakpoints(t0, t1), self.averaged.breakpoints(t0, t1))
    }
}

/// Sorted union of two ascending breakpoint lists.
pub fn merge_breakpoints(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    a.extend(b);
    a.sort_by(f64::total_cmp);
    a.dedup();
    a
}

/// On-disk generator definition.
///
/// `{ "dim": N, "terms": [ { "omega", "amplitude_re", "amplitude_im" } ],
///    "decay": { "c", "sigma" } }`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub dim: usize,
    pub terms: Vec<TermRecord>,
    pub decay: Decay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub omega: f64,
    pub amplitude_re: Vec<Vec<f64>>,
    pub amplitude_im: Vec<Vec<f64>>,
}

impl ProblemFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_generator(gen: &QuasiperiodicGenerator) -> Self {
        let n = gen.dim();
        let terms = gen
            .terms()
            .iter()
            .map(|t| TermRecord {
                omega: t.omega,
                amplitude_re: (0..n)
                    .map(|i| (0..n).map(|j| t.amplitude[(i, j)].re).collect())
                    .collect(),
                amplitude_im: (0..n)
                    .map(|i| (0..n).map(|j| t.amplitude[(i, j)].im).collect())
                    .collect(),
            })
            .collect();
        Self {
            dim: n,
            terms,
            decay: gen.decay(),
        }
    }

    /// Term `k` of the file gets series index `j = k + 1`.
    pub fn to_generator(&self, strict: bool) -> Result<QuasiperiodicGenerator> {
        let n = self.dim;
        let mut terms = Vec::with_capacity(self.terms.len());
        for (k, rec) in self.terms.iter().enumerate() {
            let rows_ok = rec.amplitude_re.len() == n && rec.amplitude_im.len() == n;
            let cols_ok = rec.amplitude_re.iter().chain(&rec.amplitude_im).all(|r| r.len() == n);
            if !(rows_ok && cols_ok) {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: rec.amplitude_re.len(),
                });
            }
            let m = CMatrix::from_fn(n, n, |i, j| C64::new(rec.amplitude_re[i][j], rec.amplitude_im[i][j]));
            terms.push(QuasiperiodicTerm::new(m, rec.omega, k + 1));
        }
        QuasiperiodicGenerator::new(n, terms, self.decay, strict)
    }
}
