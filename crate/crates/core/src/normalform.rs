//! Near-identity normal-form maps that raise the effective coupling from
//! `β` to `β^{3/2}`.
//!
//! With `B(t) = ∫_{Tᵢ}^{t} (A₁ − Ā₁ᵍ)` and `K = U₁⁻¹BU₁` the map is
//! `Ũ = I + iβK` (affine) or `Ũ = e^{iβK}` (unitary). The transformed state
//! `c₂ᵁ = Ũc₂` obeys `i ċ₂ᵁ = β^{3/2}Ã c₂ᵁ` with
//! `β^{3/2}Ã = (iŨ' + βŨA₂)Ũ⁻¹`.
//!
//! The direct kernel uses `B(t) = ∫_{Tᵢ}^{t} A₁` without conjugation and acts
//! on `c₁` instead of `c₂`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::averaging::{
    build_hierarchy, residual_integral, AveragingConfig, HierarchyLevel, PiecewiseConstantGenerator,
    PiecewisePropagator,
};
use crate::error::{Error, Result};
use crate::generators::{merge_breakpoints, Generator, SharedGenerator};
use crate::matcore::{identity, spectral_norm, CMatrix, HermitianMatrix, StateVector, C64};
use crate::quadrature::Quadrature;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalFormMode {
    Affine,
    #[default]
    Unitary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `∫ (A₁ − Ā₁ᵍ)`, conjugated by `U₁`.
    #[default]
    Residual,
    /// `∫ A₁`, unconjugated.
    Direct,
}

#[derive(Clone, Debug)]
pub struct NormalFormMap {
    base_time: f64,
    beta: f64,
    mode: NormalFormMode,
    kernel: KernelKind,
    generator: SharedGenerator,
    averaged: Arc<PiecewiseConstantGenerator>,
    conjugator: Arc<PiecewisePropagator>,
    quadrature: Quadrature,
    // Antiderivative at Tᵢ, subtracted so that B(Tᵢ) = 0 exactly.
    offset: CMatrix,
}

/// Builds the map from level 1 `(A₁, Ā₁ᵍ, U₁)` with base time `Tᵢ`.
pub fn build_normal_form(
    level1: &HierarchyLevel,
    ti: f64,
    mode: NormalFormMode,
    kernel: KernelKind,
    quadrature: &Quadrature,
) -> Result<NormalFormMap> {
    level1.averaged.block_index(ti)?;
    let mut map = NormalFormMap {
        base_time: ti,
        beta: level1.propagator.beta(),
        mode,
        kernel,
        generator: level1.generator.clone(),
        averaged: level1.averaged.clone(),
        conjugator: level1.propagator.clone(),
        quadrature: quadrature.clone(),
        offset: CMatrix::zeros(level1.dim(), level1.dim()),
    };
    map.offset = map.antiderivative(ti)?;
    Ok(map)
}

impl NormalFormMap {
    pub fn base_time(&self) -> f64 {
        self.base_time
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mode(&self) -> NormalFormMode {
        self.mode
    }

    pub fn kernel(&self) -> KernelKind {
        self.kernel
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    pub fn conjugator(&self) -> &Arc<PiecewisePropagator> {
        &self.conjugator
    }

    pub fn horizon(&self) -> f64 {
        self.averaged.horizon()
    }

    fn antiderivative(&self, t: f64) -> Result<CMatrix> {
        match self.kernel {
            KernelKind::Residual => residual_integral(self.generator.as_ref(), &self.averaged, &self.quadrature, t),
            KernelKind::Direct => {
                let avg = &self.averaged;
                let n = avg.block_index(t)?;
                let t0 = avg.t0();
                let mut total = CMatrix::zeros(self.dim(), self.dim());
                for b in &avg.blocks()[..n] {
                    total += b.matrix() * C64::new(t0, 0.0);
                }
                let g = self.generator.as_ref();
                let start = n as f64 * t0;
                let r =
                    self.quadrature
                        .integrate(|s| g.evaluate(s), start, t, g.max_frequency(), g.norm_bound() * t0)?;
                Ok(total + r.value)
            }
        }
    }

    /// `B(t)`.
    pub fn kernel_at(&self, t: f64) -> Result<CMatrix> {
        Ok(self.antiderivative(t)? - &self.offset)
    }

    /// `K(t)`: `U₁⁻¹BU₁` for the residual kernel, `B` for the direct one.
    pub fn conjugated_kernel(&self, t: f64) -> Result<CMatrix> {
        let b = self.kernel_at(t)?;
        match self.kernel {
            KernelKind::Residual => Ok(self.conjugator.inverse_at(t)?.matrix() * b * self.conjugator.at(t)?.matrix()),
            KernelKind::Direct => Ok(b),
        }
    }

    /// Generator of the flow `Ũ` acts on: `A₂ = U₁⁻¹(A₁ − Ā₁ᵍ)U₁`, or `A₁`
    /// for the direct kernel.
    pub fn inner_generator(&self, t: f64) -> Result<CMatrix> {
        let a1 = self.generator.evaluate(t)?;
        match self.kernel {
            KernelKind::Residual => {
                let diff = a1 - self.averaged.value_at(t)?.matrix();
                Ok(self.conjugator.inverse_at(t)?.matrix() * diff * self.conjugator.at(t)?.matrix())
            }
            KernelKind::Direct => Ok(a1),
        }
    }

    /// `K'(t)`: `A₂ + iβU₁⁻¹[Ā₁ᵍ, B]U₁`, or `A₁` for the direct kernel.
    pub fn kernel_derivative(&self, t: f64) -> Result<CMatrix> {
        match self.kernel {
            KernelKind::Residual => {
                let b = self.kernel_at(t)?;
                let avg = self.averaged.value_at(t)?.matrix();
                let comm = avg * &b - &b * avg;
                let conj = self.conjugator.inverse_at(t)?.matrix() * comm * self.conjugator.at(t)?.matrix();
                Ok(self.inner_generator(t)? + conj * C64::new(0.0, self.beta))
            }
            KernelKind::Direct => self.generator.evaluate(t),
        }
    }

    fn kernel_hermitian(&self, k: CMatrix) -> Result<HermitianMatrix> {
        let scale = self.generator.norm_bound() * self.averaged.t0();
        HermitianMatrix::with_scale(k, scale)
    }

    /// `Ũ(t)`.
    pub fn transform(&self, t: f64) -> Result<CMatrix> {
        Ok(self.transform_with_derivative(t, false)?.0)
    }

    /// `Ũ(t)` and, if requested, `Ũ'(t)`.
    ///
    /// In unitary mode the derivative of `e^{iβK}` is exact: in the
    /// eigenbasis of `K` it is the Hadamard product of `K'` with the divided
    /// differences of `λ ↦ e^{iβλ}`.
    pub fn transform_with_derivative(&self, t: f64, derivative: bool) -> Result<(CMatrix, Option<CMatrix>)> {
        let n = self.dim();
        let k = self.conjugated_kernel(t)?;
        let ib = C64::new(0.0, self.beta);
        let dk = if derivative {
            Some(self.kernel_derivative(t)?)
        } else {
            None
        };
        match self.mode {
            NormalFormMode::Affine => Ok((identity(n) + &k * ib, dk.map(|d| d * ib))),
            NormalFormMode::Unitary => {
                if k.iter().all(|z| *z == C64::new(0.0, 0.0)) {
                    return Ok((identity(n), dk.map(|d| d * ib)));
                }
                let spec = self.kernel_hermitian(k)?.eigen()?;
                let u = spec.exp(-self.beta).into_matrix();
                let du = dk.map(|dk| {
                    let v = spec.eigenvectors();
                    let lam = spec.eigenvalues();
                    let mut d = v.adjoint() * dk * v;
                    for a in 0..n {
                        for b in 0..n {
                            let mid = 0.5 * (lam[a] + lam[b]);
                            let x = 0.5 * self.beta * (lam[a] - lam[b]);
                            let sinc = if x.abs() < 1e-8 { 1.0 - x * x / 6.0 } else { x.sin() / x };
                            d[(a, b)] *= ib * C64::from_polar(1.0, self.beta * mid) * sinc;
                        }
                    }
                    v * d * v.adjoint()
                });
                Ok((u, du))
            }
        }
    }

    /// `Ũ⁻¹(t)`: the adjoint in unitary mode, an LU solve in affine mode.
    pub fn transform_inverse(&self, t: f64) -> Result<CMatrix> {
        let u = self.transform(t)?;
        match self.mode {
            NormalFormMode::Unitary => Ok(u.adjoint()),
            NormalFormMode::Affine => invert(u),
        }
    }

    /// `‖Ũ(t) − I‖`.
    pub fn closeness(&self, t: f64) -> Result<f64> {
        Ok(spectral_norm(&(self.transform(t)? - identity(self.dim()))))
    }
}

fn invert(m: CMatrix) -> Result<CMatrix> {
    m.lu()
        .try_inverse()
        .ok_or_else(|| Error::NumericDomain("normal-form map is singular".into()))
}

/// `c₂ᵁ = Ũ(t)c₂`.
pub fn apply_normal_form(map: &NormalFormMap, c2: &StateVector, t: f64) -> Result<StateVector> {
    c2.transform(&map.transform(t)?)
}

/// `c₂ = Ũ⁻¹(t)c₂ᵁ`, by linear solve in affine mode.
pub fn apply_inverse_normal_form(map: &NormalFormMap, c2u: &StateVector, t: f64) -> Result<StateVector> {
    if c2u.dim() != map.dim() {
        return Err(Error::DimensionMismatch {
            expected: map.dim(),
            found: c2u.dim(),
        });
    }
    let u = map.transform(t)?;
    match map.mode() {
        NormalFormMode::Unitary => c2u.transform(&u.adjoint()),
        NormalFormMode::Affine => {
            let x = u
                .lu()
                .solve(c2u.vector())
                .ok_or_else(|| Error::NumericDomain("normal-form map is singular".into()))?;
            StateVector::new(x)
        }
    }
}

/// `Ã(t) = β^{−3/2}(iŨ' + βŨA₂)Ũ⁻¹`.
pub fn effective_generator(map: &NormalFormMap, t: f64) -> Result<CMatrix> {
    let (u, du) = map.transform_with_derivative(t, true)?;
    let du = du.expect("derivative requested");
    let beta = map.beta();
    let lhs = du * C64::i() + &u * map.inner_generator(t)? * C64::new(beta, 0.0);
    let u_inv = match map.mode() {
        NormalFormMode::Unitary => u.adjoint(),
        NormalFormMode::Affine => invert(u)?,
    };
    Ok(lhs * u_inv * C64::new(beta.powf(-1.5), 0.0))
}

/// The bracket form
/// `iβ^{1/2}[−U₁⁻¹Ā₁ᵍBU₁ + U₁⁻¹BĀ₁ᵍU₁ + U₁⁻¹BU₁A₂]Ũ⁻¹`, valid for the affine
/// map with the residual kernel.
pub fn effective_generator_bracket(map: &NormalFormMap, t: f64) -> Result<CMatrix> {
    if map.mode() != NormalFormMode::Affine || map.kernel() != KernelKind::Residual {
        return Err(Error::InvalidConfig(
            "bracket form needs the affine residual map".into(),
        ));
    }
    let b = map.kernel_at(t)?;
    let u1 = map.conjugator.at(t)?.into_matrix();
    let u1_inv = map.conjugator.inverse_at(t)?.into_matrix();
    let avg = map.averaged.value_at(t)?.matrix();
    let a2 = map.inner_generator(t)?;
    let bracket = -(&u1_inv * avg * &b * &u1) + &u1_inv * &b * avg * &u1 + &u1_inv * &b * &u1 * a2;
    Ok(bracket * map.transform_inverse(t)? * C64::new(0.0, map.beta().sqrt()))
}

/// `V = U₀U₁Ũ⁻¹`, so that `c = V c₂ᵁ`.
pub fn compose_step(
    u0: &PiecewisePropagator,
    u1: &PiecewisePropagator,
    map: &NormalFormMap,
    t: f64,
) -> Result<CMatrix> {
    Ok(u0.at(t)?.matrix() * u1.at(t)?.matrix() * map.transform_inverse(t)?)
}

/// Samples used to estimate `sup‖Ã‖` for a [`Generator`] wrapper.
const NORM_SAMPLES: usize = 64;

const CANCELLATION_NOISE: f64 = 1e-12;

/// `Ã` as a generator in its own right.
#[derive(Clone, Debug)]
pub struct EffectiveGenerator {
    map: NormalFormMap,
    norm_bound: f64,
    max_frequency: f64,
}

impl EffectiveGenerator {
    /// `norm_bound` is twice the largest sampled norm, not a proven bound.
    pub fn new(map: NormalFormMap) -> Result<Self> {
        let end = map.horizon() * (1.0 - 1e-12);
        let mut max: f64 = 0.0;
        for k in 0..=NORM_SAMPLES {
            let t = end * k as f64 / NORM_SAMPLES as f64;
            max = max.max(spectral_norm(&effective_generator(&map, t)?));
        }
        let max_frequency = map.generator.max_frequency() + 2.0 * map.beta * map.averaged.max_norm();
        // Ã is formed by cancelling O(β) terms and dividing by β^{3/2}, so
        // values below this floor are rounding noise.
        let floor = CANCELLATION_NOISE * map.generator.norm_bound() / map.beta.sqrt();
        Ok(Self {
            map,
            norm_bound: (2.0 * max).max(floor),
            max_frequency,
        })
    }

    pub fn map(&self) -> &NormalFormMap {
        &self.map
    }
}

impl Generator for EffectiveGenerator {
    fn dim(&self) -> usize {
        self.map.dim()
    }

    fn evaluate(&self, t: f64) -> Result<CMatrix> {
        effective_generator(&self.map, t)
    }

    fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    fn max_frequency(&self) -> f64 {
        self.max_frequency
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        merge_breakpoints(
            self.map.generator.breakpoints(t0, t1),
            self.map.averaged.breakpoints(t0, t1),
        )
    }
}

/// One normal-form step `c = U₀U₁Ũ⁻¹ c₂ᵁ`.
#[derive(Clone, Debug)]
pub struct StageTransform {
    pub outer: Arc<PiecewisePropagator>,
    pub map: NormalFormMap,
}

impl StageTransform {
    pub fn matrix_at(&self, t: f64) -> Result<CMatrix> {
        compose_step(&self.outer, self.map.conjugator(), &self.map, t)
    }
}

#[derive(Clone, Debug)]
pub struct EffectiveSystem {
    pub generator: SharedGenerator,
    pub coupling: f64,
    pub t0: f64,
    /// `V₁, V₂, …` mapping this stage's state back to the original one,
    /// outermost first.
    pub transform_chain: Vec<StageTransform>,
}

impl EffectiveSystem {
    /// `V₁V₂⋯` at `t`.
    pub fn chain_at(&self, t: f64) -> Result<CMatrix> {
        let mut v = identity(self.generator.dim());
        for s in &self.transform_chain {
            v *= s.matrix_at(t)?;
        }
        Ok(v)
    }
}

pub const MAX_SCHEME_DEPTH: usize = 3;

/// Stages `1..=depth` of the iterated scheme on `[0, horizon]`. Stage `m`
/// has coupling `β^{(3/2)^{m−1}}` and averaging time `coupling^{−1/2}`.
pub fn iterate_scheme(
    base: SharedGenerator,
    beta: f64,
    depth: usize,
    horizon: f64,
    mode: NormalFormMode,
) -> Result<Vec<EffectiveSystem>> {
    if depth == 0 {
        return Err(Error::InvalidConfig("scheme depth must be positive".into()));
    }
    if depth > MAX_SCHEME_DEPTH {
        return Err(Error::DepthExceeded {
            requested: depth,
            max: MAX_SCHEME_DEPTH,
        });
    }
    let couplings: Vec<f64> = (0..depth).map(|m| beta.powf(1.5f64.powi(m as i32))).collect();
    // Each effective generator is only defined on the blocks of the stage
    // that produced it, so earlier stages must cover the later blocks.
    let mut horizons = vec![horizon; depth];
    for m in (0..depth - 1).rev() {
        let t0 = couplings[m + 1].powf(-0.5);
        horizons[m] = ((horizons[m + 1] / t0).floor() + 1.0) * t0;
    }
    let mut stages = vec![EffectiveSystem {
        generator: base,
        coupling: beta,
        t0: beta.powf(-0.5),
        transform_chain: Vec::new(),
    }];
    for m in 1..depth {
        let prev = stages.last().expect("non-empty");
        let cfg = AveragingConfig::new(prev.coupling, horizons[m - 1])?;
        let levels = build_hierarchy(prev.generator.clone(), &cfg, 1)?;
        let map = build_normal_form(&levels[1], 0.0, mode, KernelKind::Residual, cfg.quadrature())?;
        let generator: SharedGenerator = Arc::new(EffectiveGenerator::new(map.clone())?);
        let coupling = couplings[m];
        let mut chain = prev.transform_chain.clone();
        chain.push(StageTransform {
            outer: levels[0].propagator.clone(),
            map,
        });
        stages.push(EffectiveSystem {
            generator,
            coupling,
            t0: coupling.powf(-0.5),
            transform_chain: chain,
        });
    }
    Ok(stages)
}

/// Levels 0 and 1 plus the stage-1 normal form with base time `Tᵢ`.
pub fn stage_one(
    base: SharedGenerator,
    cfg: &AveragingConfig,
    ti: f64,
    mode: NormalFormMode,
    kernel: KernelKind,
) -> Result<(Vec<HierarchyLevel>, NormalFormMap)> {
    let levels = build_hierarchy(base, cfg, 1)?;
    let map = build_normal_form(&levels[1], ti, mode, kernel, cfg.quadrature())?;
    Ok((levels, map))
}
