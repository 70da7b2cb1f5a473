//! Finite-interval averaging, piecewise propagators and the peel-off
//! hierarchy.
//!
//! Intervals are left-closed: block `n` is `[nT₀, (n+1)T₀)` and the block
//! index of `t` is `⌊t/T₀⌋`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::generators::{peeled_generator, Generator, SharedGenerator};
use crate::matcore::{
    identity, spectral_norm, CMatrix, HermitianMatrix, SpectralDecomposition, StateVector, UnitaryMatrix, C64,
};
use crate::quadrature::Quadrature;

/// Deepest hierarchy level that may be requested. Each level evaluates the
/// previous one at every quadrature node, so cost grows exponentially.
pub const MAX_HIERARCHY_DEPTH: usize = 4;

#[derive(Clone, Debug)]
pub struct AveragingConfig {
    beta: f64,
    t0: f64,
    t0_overridden: bool,
    horizon: f64,
    quadrature: Quadrature,
}

impl AveragingConfig {
    pub const MAX_BETA: f64 = 0.1;

    /// `T₀ = β^{−1/2}`; requires `0 < β ≤ 0.1`.
    pub fn new(beta: f64, horizon: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= Self::MAX_BETA) {
            return Err(Error::InvalidConfig(format!(
                "beta {beta} outside (0, {}]",
                Self::MAX_BETA
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidConfig(format!("horizon {horizon} must be positive")));
        }
        Ok(Self {
            beta,
            t0: beta.powf(-0.5),
            t0_overridden: false,
            horizon,
            quadrature: Quadrature::default(),
        })
    }

    /// Horizon `10/β`.
    pub fn with_default_horizon(beta: f64) -> Result<Self> {
        Self::new(beta, 10.0 / beta)
    }

    pub fn with_t0(mut self, t0: f64) -> Result<Self> {
        if !(t0 > 0.0 && t0.is_finite()) {
            return Err(Error::InvalidConfig(format!("T0 {t0} must be positive")));
        }
        self.t0 = t0;
        self.t0_overridden = true;
        Ok(self)
    }

    pub fn with_quadrature(mut self, order: usize, rel_tol: f64) -> Self {
        self.quadrature = Quadrature::new(order, rel_tol);
        self
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t0_overridden(&self) -> bool {
        self.t0_overridden
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.quadrature
    }

    pub fn quadrature_order(&self) -> usize {
        self.quadrature.order()
    }

    /// Blocks needed to cover `[0, horizon]` with left-closed intervals.
    pub fn block_count(&self) -> usize {
        (self.horizon / self.t0).floor() as usize + 1
    }
}

/// `Āᵍ(t) = Ā⁽ⁿ⁾` for `t ∈ [nT₀, (n+1)T₀)`.
#[derive(Clone, Debug)]
pub struct PiecewiseConstantGenerator {
    blocks: Vec<HermitianMatrix>,
    t0: f64,
    max_norm: f64,
}

impl PiecewiseConstantGenerator {
    pub fn new(blocks: Vec<HermitianMatrix>, t0: f64) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| Error::InvalidConfig("no blocks".into()))?;
        let dim = first.dim();
        if let Some(bad) = blocks.iter().find(|b| b.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.dim(),
            });
        }
        if !(t0 > 0.0 && t0.is_finite()) {
            return Err(Error::InvalidConfig(format!("T0 {t0} must be positive")));
        }
        let max_norm = blocks.iter().map(|b| b.norm()).fold(0.0, f64::max);
        Ok(Self { blocks, t0, max_norm })
    }

    pub fn blocks(&self) -> &[HermitianMatrix] {
        &self.blocks
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].dim()
    }

    /// `max_n ‖Ā⁽ⁿ⁾‖`.
    pub fn max_norm(&self) -> f64 {
        self.max_norm
    }

    /// End of the last block.
    pub fn horizon(&self) -> f64 {
        self.blocks.len() as f64 * self.t0
    }

    pub fn block_index(&self, t: f64) -> Result<usize> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::HorizonExceeded {
                t,
                horizon: self.horizon(),
            });
        }
        let n = (t / self.t0).floor() as usize;
        if n >= self.blocks.len() {
            return Err(Error::HorizonExceeded {
                t,
                horizon: self.horizon(),
            });
        }
        Ok(n)
    }

    pub fn value_at(&self, t: f64) -> Result<&HermitianMatrix> {
        Ok(&self.blocks[self.block_index(t)?])
    }
}

impl Generator for PiecewiseConstantGenerator {
    fn dim(&self) -> usize {
        PiecewiseConstantGenerator::dim(self)
    }

    fn evaluate(&self, t: f64) -> Result<CMatrix> {
        Ok(self.value_at(t)?.matrix().clone())
    }

    fn norm_bound(&self) -> f64 {
        self.max_norm
    }

    fn max_frequency(&self) -> f64 {
        0.0
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        let first = (t0 / self.t0).floor() as i64 + 1;
        (first.max(1)..self.blocks.len() as i64)
            .map(|k| k as f64 * self.t0)
            .take_while(|&b| b < t1)
            .filter(|&b| b > t0)
            .collect()
    }
}

/// `U(t) = e^{−iβĀ⁽ⁿ⁾(t−nT₀)} e^{−iβĀ⁽ⁿ⁻¹⁾T₀} ⋯ e^{−iβĀ⁽⁰⁾T₀}`.
///
/// Forward and inverse prefix products are accumulated independently, the
/// inverse in the reversed order `e^{+iβĀ⁽⁰⁾T₀} ⋯ e^{+iβĀ⁽ⁿ⁾(t−nT₀)}`.
#[derive(Clone, Debug)]
pub struct PiecewisePropagator {
    averaged: Arc<PiecewiseConstantGenerator>,
    beta: f64,
    spectra: Vec<SpectralDecomposition>,
    interval_factors: Vec<UnitaryMatrix>,
    // prefix[k] = factor(k−1)⋯factor(0); prefix[0] = I.
    prefix: Vec<CMatrix>,
    inverse_prefix: Vec<CMatrix>,
}

pub fn build_propagator(averaged: Arc<PiecewiseConstantGenerator>, beta: f64) -> Result<PiecewisePropagator> {
    if !beta.is_finite() {
        return Err(Error::NumericDomain(format!("non-finite coupling {beta}")));
    }
    let n = averaged.dim();
    let t0 = averaged.t0();
    let spectra = averaged
        .blocks()
        .iter()
        .map(|b| b.eigen())
        .collect::<Result<Vec<_>>>()?;
    let interval_factors: Vec<UnitaryMatrix> = spectra.iter().map(|s| s.exp(beta * t0)).collect();
    let mut prefix = Vec::with_capacity(spectra.len() + 1);
    let mut inverse_prefix = Vec::with_capacity(spectra.len() + 1);
    prefix.push(identity(n));
    inverse_prefix.push(identity(n));
    for (k, spec) in spectra.iter().enumerate() {
        let next = interval_factors[k].matrix() * &prefix[k];
        prefix.push(next);
        let next_inv = &inverse_prefix[k] * spec.exp(-beta * t0).matrix();
        inverse_prefix.push(next_inv);
    }
    Ok(PiecewisePropagator {
        averaged,
        beta,
        spectra,
        interval_factors,
        prefix,
        inverse_prefix,
    })
}

impl PiecewisePropagator {
    pub fn dim(&self) -> usize {
        self.averaged.dim()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn t0(&self) -> f64 {
        self.averaged.t0()
    }

    pub fn averaged(&self) -> &Arc<PiecewiseConstantGenerator> {
        &self.averaged
    }

    pub fn interval_factors(&self) -> &[UnitaryMatrix] {
        &self.interval_factors
    }

    /// `U(nT₀)`, the product of the first `n` whole-interval factors.
    pub fn prefix_product(&self, n: usize) -> &CMatrix {
        &self.prefix[n]
    }

    pub fn at(&self, t: f64) -> Result<UnitaryMatrix> {
        let n = self.averaged.block_index(t)?;
        let tau = t - n as f64 * self.t0();
        Ok(UnitaryMatrix::from_product(
            self.spectra[n].exp(self.beta * tau).matrix() * &self.prefix[n],
        ))
    }

    pub fn inverse_at(&self, t: f64) -> Result<UnitaryMatrix> {
        let n = self.averaged.block_index(t)?;
        let tau = t - n as f64 * self.t0();
        Ok(UnitaryMatrix::from_product(
            &self.inverse_prefix[n] * self.spectra[n].exp(-self.beta * tau).matrix(),
        ))
    }

    /// `βĀᵍ(t)`, the generator of `i dU/dt = βĀᵍ(t) U`.
    pub fn generator_at(&self, t: f64) -> Result<CMatrix> {
        Ok(self.averaged.value_at(t)?.matrix() * C64::new(self.beta, 0.0))
    }

    /// `‖[U(t+h) − U(t−h)]/(2h) + iβĀᵍ(t)U(t)‖`.
    pub fn derivative_residual(&self, t: f64, h: f64) -> Result<f64> {
        let fd = (self.at(t + h)?.into_matrix() - self.at(t - h)?.into_matrix()) / C64::new(2.0 * h, 0.0);
        let rhs = self.generator_at(t)? * self.at(t)?.matrix() * C64::i();
        Ok(spectral_norm(&(fd + rhs)))
    }
}

fn check_block_in_horizon(cfg: &AveragingConfig, n: usize) -> Result<()> {
    let start = n as f64 * cfg.t0();
    if start > cfg.horizon() {
        return Err(Error::HorizonExceeded {
            t: start,
            horizon: cfg.horizon(),
        });
    }
    Ok(())
}

/// `Ā⁽ⁿ⁾ = (1/T₀)∫_{nT₀}^{(n+1)T₀} A(s) ds`.
pub fn block_average(gen: &dyn Generator, cfg: &AveragingConfig, n: usize) -> Result<HermitianMatrix> {
    check_block_in_horizon(cfg, n)?;
    let t0 = cfg.t0();
    let a = n as f64 * t0;
    let r = cfg.quadrature().integrate(
        |t| gen.evaluate(t),
        a,
        a + t0,
        gen.max_frequency(),
        gen.norm_bound() * t0,
    )?;
    HermitianMatrix::with_scale(r.value / C64::new(t0, 0.0), gen.norm_bound())
}

pub fn global_average(gen: &dyn Generator, cfg: &AveragingConfig) -> Result<PiecewiseConstantGenerator> {
    let blocks = (0..cfg.block_count())
        .map(|n| block_average(gen, cfg, n))
        .collect::<Result<Vec<_>>>()?;
    PiecewiseConstantGenerator::new(blocks, cfg.t0())
}

fn partial_block_integral(
    gen: &dyn Generator,
    avg: &PiecewiseConstantGenerator,
    quadrature: &Quadrature,
    a: f64,
    b: f64,
    n: usize,
) -> Result<CMatrix> {
    let avg_n = avg.blocks()[n].matrix();
    let scale = (gen.norm_bound() + avg.max_norm()) * avg.t0();
    let r = quadrature.integrate(|s| Ok(gen.evaluate(s)? - avg_n), a, b, gen.max_frequency(), scale)?;
    Ok(r.value)
}

/// `∫₀ᵗ (A − Āᵍ)`, computed as `∫_{nT₀}^{t} (A − Ā⁽ⁿ⁾)` with `n = ⌊t/T₀⌋`
/// since every completed block integrates to zero.
pub fn residual_integral(
    gen: &dyn Generator,
    avg: &PiecewiseConstantGenerator,
    quadrature: &Quadrature,
    t: f64,
) -> Result<CMatrix> {
    let n = avg.block_index(t)?;
    let start = n as f64 * avg.t0();
    partial_block_integral(gen, avg, quadrature, start, t, n)
}

/// Residual integral sampled at `points` equally spaced interior times of
/// block `n` plus its right end, accumulated panel by panel.
pub fn residual_profile(
    gen: &dyn Generator,
    avg: &PiecewiseConstantGenerator,
    quadrature: &Quadrature,
    n: usize,
    points: usize,
) -> Result<Vec<(f64, CMatrix)>> {
    let t0 = avg.t0();
    let start = n as f64 * t0;
    let h = t0 / points as f64;
    let mut acc = CMatrix::zeros(avg.dim(), avg.dim());
    let mut out = Vec::with_capacity(points);
    for k in 0..points {
        let a = start + k as f64 * h;
        acc += partial_block_integral(gen, avg, quadrature, a, a + h, n)?;
        out.push((a + h, acc.clone()));
    }
    Ok(out)
}

/// One rung `(Aₙ, Āₙᵍ, Uₙ)` of the averaging hierarchy.
#[derive(Clone, Debug)]
pub struct HierarchyLevel {
    pub index: usize,
    pub generator: SharedGenerator,
    pub averaged: Arc<PiecewiseConstantGenerator>,
    pub propagator: Arc<PiecewisePropagator>,
    /// `max_n ‖Āₙ⁽ᵏ⁾‖`.
    pub avg_magnitude: f64,
    /// Observed `max ‖∫₀ᵗ (Aₙ − Āₙᵍ)‖` on the sampling grid.
    pub residual_integral_bound: f64,
}

/// Sampling points per block for `residual_integral_bound`.
const RESIDUAL_POINTS_PER_BLOCK: usize = 8;

impl HierarchyLevel {
    fn build(index: usize, generator: SharedGenerator, cfg: &AveragingConfig) -> Result<Self> {
        let averaged = Arc::new(global_average(generator.as_ref(), cfg)?);
        let propagator = Arc::new(build_propagator(averaged.clone(), cfg.beta())?);
        let mut bound: f64 = 0.0;
        for n in 0..averaged.blocks().len() {
            for (_, r) in residual_profile(
                generator.as_ref(),
                &averaged,
                cfg.quadrature(),
                n,
                RESIDUAL_POINTS_PER_BLOCK,
            )? {
                bound = bound.max(spectral_norm(&r));
            }
        }
        Ok(Self {
            index,
            generator,
            avg_magnitude: averaged.max_norm(),
            averaged,
            propagator,
            residual_integral_bound: bound,
        })
    }

    /// Level 0: the generator itself with its averages and propagator.
    pub fn base(generator: SharedGenerator, cfg: &AveragingConfig) -> Result<Self> {
        Self::build(0, generator, cfg)
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    /// `∫_{nT₀}^{t} (Aₙ − Āₙ⁽ⁿ⁾)`, i.e. `∫₀ᵗ (Aₙ − Āₙᵍ)`.
    pub fn residual_integral(&self, quadrature: &Quadrature, t: f64) -> Result<CMatrix> {
        residual_integral(self.generator.as_ref(), &self.averaged, quadrature, t)
    }
}

/// `Aₙ₊₁ = Uₙ⁻¹[Aₙ − Āₙᵍ]Uₙ` together with its averages and propagator.
pub fn peel_step(level: &HierarchyLevel, cfg: &AveragingConfig) -> Result<HierarchyLevel> {
    let next = level.index + 1;
    if next > MAX_HIERARCHY_DEPTH {
        return Err(Error::DepthExceeded {
            requested: next,
            max: MAX_HIERARCHY_DEPTH,
        });
    }
    let peeled = peeled_generator(
        level.generator.clone(),
        level.propagator.clone(),
        level.averaged.clone(),
    )?;
    HierarchyLevel::build(next, Arc::new(peeled), cfg)
}

/// Levels `0..=depth`.
pub fn build_hierarchy(generator: SharedGenerator, cfg: &AveragingConfig, depth: usize) -> Result<Vec<HierarchyLevel>> {
    if depth > MAX_HIERARCHY_DEPTH {
        return Err(Error::DepthExceeded {
            requested: depth,
            max: MAX_HIERARCHY_DEPTH,
        });
    }
    let mut levels = vec![HierarchyLevel::base(generator, cfg)?];
    for _ in 0..depth {
        let next = peel_step(levels.last().expect("non-empty"), cfg)?;
        levels.push(next);
    }
    Ok(levels)
}

/// `Iₙ(t) = ∫₀ᵗ Aₙ` and its spectral norm.
///
/// Completed blocks contribute `T₀·Āₙ⁽ᵏ⁾` (their quadrature averages); the
/// last partial block is integrated directly.
pub fn diagnostic_in(level: &HierarchyLevel, quadrature: &Quadrature, t: f64) -> Result<(CMatrix, f64)> {
    let avg = &level.averaged;
    let n = avg.block_index(t)?;
    let t0 = avg.t0();
    let mut total = CMatrix::zeros(level.dim(), level.dim());
    for b in &avg.blocks()[..n] {
        total += b.matrix() * C64::new(t0, 0.0);
    }
    let gen = level.generator.as_ref();
    let start = n as f64 * t0;
    let r = quadrature.integrate(
        |s| gen.evaluate(s),
        start,
        t,
        gen.max_frequency(),
        gen.norm_bound() * t0,
    )?;
    total += r.value;
    let norm = spectral_norm(&total);
    Ok((total, norm))
}

/// The averaged approximation `U(t)·c(0)`.
pub fn solve_averaged(state0: &StateVector, propagator: &PiecewisePropagator, t: f64) -> Result<StateVector> {
    if state0.dim() != propagator.dim() {
        return Err(Error::DimensionMismatch {
            expected: propagator.dim(),
            found: state0.dim(),
        });
    }
    Ok(propagator.at(t)?.apply(state0))
}
