//! Scaling sweeps: seeded problem families, per-cell measurements, log-log
//! slope fits and raw tables.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{
    build_hierarchy, build_propagator, diagnostic_in, global_average, residual_integral, AveragingConfig,
    HierarchyLevel,
};
use crate::error::{Error, Result};
use crate::generators::{
    split_frequencies, ConstantGenerator, Decay, Generator, ProblemFile, QuasiperiodicGenerator, QuasiperiodicTerm,
    SharedGenerator, SplitConfig,
};
use crate::matcore::{spectral_norm, CMatrix, HermitianMatrix, C64};
use crate::normalform::{effective_generator, stage_one, KernelKind, NormalFormMode};
use crate::oracle::{evolve_grid, OracleConfig};

pub const DEFAULT_DIM: usize = 4;
pub const DEFAULT_TERMS: usize = 8;
pub const DEFAULT_DELTA: f64 = 0.5;
pub const DEFAULT_BETAS: [f64; 4] = [1e-2, 3.1622776601683794e-3, 1e-3, 3.1622776601683794e-4];

/// Random quasiperiodic families. Amplitudes are complex Gaussian matrices
/// rescaled to `‖Mⱼ‖ = j^{−1−δ}`; frequencies depend on the family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `ωⱼ` log-uniform in `[10⁻³β^{1/2}, 5]`.
    Broadband,
    /// `ωⱼ` log-uniform in `[10⁻³β^{1/2}, 5β^{1/2}]`: every frequency sits on
    /// the averaging scale `1/T₀`.
    Scaled,
    /// The first half of the terms fast (`ω ∈ [0.5, 5]`), the rest slow
    /// (`ω = κβ`, `κ ∈ [0.1, 1]`).
    SplitRegime,
}

impl Family {
    fn omega(self, j: usize, terms: usize, u: f64, beta: f64) -> f64 {
        let log_uniform = |lo: f64, hi: f64| (lo.ln() + u * (hi.ln() - lo.ln())).exp();
        match self {
            Family::Broadband => log_uniform(1e-3 * beta.sqrt(), 5.0),
            Family::Scaled => log_uniform(1e-3 * beta.sqrt(), 5.0 * beta.sqrt()),
            Family::SplitRegime => {
                if j <= terms.div_ceil(2) {
                    0.5 + 4.5 * u
                } else {
                    (0.1 + 0.9 * u) * beta
                }
            }
        }
    }
}

/// Seed of cell `(seed, repeat)`; independent of `β` so that every `β` sees
/// the same normalized draws.
pub fn cell_seed(seed: u64, repeat: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (repeat as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Draws one problem of `family` at coupling `beta`.
pub fn random_problem(
    family: Family,
    dim: usize,
    terms: usize,
    beta: f64,
    seed: u64,
) -> Result<QuasiperiodicGenerator> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 1.0 + DEFAULT_DELTA;
    let mut out = Vec::with_capacity(terms);
    for j in 1..=terms {
        let u: f64 = rng.random();
        let m = CMatrix::from_fn(dim, dim, |_, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(re, im)
        });
        let target = (j as f64).powf(-sigma);
        let m = &m * C64::new(target / spectral_norm(&m), 0.0);
        out.push(QuasiperiodicTerm::new(m, family.omega(j, terms, u, beta), j));
    }
    QuasiperiodicGenerator::new(dim, out, Decay::new(1.0, sigma), true)
}

/// A window endpoint: a literal, or `c/beta`, `c/sqrt(beta)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeToken {
    Literal(f64),
    OverBeta(f64),
    OverSqrtBeta(f64),
}

impl TimeToken {
    pub fn resolve(self, beta: f64) -> f64 {
        match self {
            TimeToken::Literal(x) => x,
            TimeToken::OverBeta(c) => c / beta,
            TimeToken::OverSqrtBeta(c) => c / beta.sqrt(),
        }
    }
}

impl FromStr for TimeToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = || Error::InvalidConfig(format!("bad window token {s:?}"));
        let coef = |c: &str| -> Result<f64> {
            let v: f64 = c.parse().map_err(|_| bad())?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad())
            }
        };
        if let Some(c) = t.strip_suffix("/sqrt(beta)") {
            return Ok(TimeToken::OverSqrtBeta(coef(c)?));
        }
        if let Some(c) = t.strip_suffix("/beta") {
            return Ok(TimeToken::OverBeta(coef(c)?));
        }
        Ok(TimeToken::Literal(coef(&t)?))
    }
}

impl fmt::Display for TimeToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeToken::Literal(x) => write!(f, "{x}"),
            TimeToken::OverBeta(c) => write!(f, "{c}/beta"),
            TimeToken::OverSqrtBeta(c) => write!(f, "{c}/sqrt(beta)"),
        }
    }
}

impl Serialize for TimeToken {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TimeToken {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(TimeToken::Literal(x)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub t_i: TimeToken,
    pub t_f: TimeToken,
}

impl Window {
    pub fn resolve(&self, beta: f64) -> Result<(f64, f64)> {
        let (a, b) = (self.t_i.resolve(beta), self.t_f.resolve(beta));
        if !(a >= 0.0 && b >= a && b.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "window [{a}, {b}] must satisfy 0 ≤ t_i ≤ t_f"
            )));
        }
        Ok((a, b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Measured {
    /// `sup‖W₁(t) − W₁(Tᵢ)‖`, `W₁ = U₀⁻¹U`.
    #[serde(rename = "c1_deviation")]
    C1Deviation,
    /// `sup‖W₂(t) − W₂(Tᵢ)‖`, `W₂ = ŨU₁⁻¹U₀⁻¹U`, map based at `Tᵢ`.
    #[serde(rename = "c2U_deviation")]
    C2UDeviation,
    /// As `c2U_deviation` with the map based at 0 instead of `Tᵢ`.
    #[serde(rename = "c2U_deviation_base0")]
    C2UDeviationBase0,
    /// `sup‖ŨW₁(t) − ŨW₁(Tᵢ)‖` with `Ũ = I + iβ∫_{Tᵢ}^{t}A₁`.
    #[serde(rename = "c1_tilde_deviation")]
    C1TildeDeviation,
    #[serde(rename = "avg1_magnitude")]
    Avg1Magnitude,
    #[serde(rename = "avg2_magnitude")]
    Avg2Magnitude,
    /// Level-2 magnitude intended for split-regime problems.
    #[serde(rename = "avg2_magnitude_split")]
    Avg2MagnitudeSplit,
    /// `sup‖Ũ(t) − I‖`.
    #[serde(rename = "normalform_defect")]
    NormalformDefect,
    /// `sup‖Ã(t)‖`.
    #[serde(rename = "effective_norm")]
    EffectiveNorm,
    /// `sup‖I₁(t)‖`.
    #[serde(rename = "In_norm")]
    InNorm,
    /// `sup‖∫(A^> − Ā^{>g})‖` over the slow part.
    #[serde(rename = "slow_residual")]
    SlowResidual,
    /// `max_n (1/T₀)‖∫_{block n} A^<‖` over the fast part.
    #[serde(rename = "fast_average")]
    FastAverage,
    /// `sup‖∫₀ᵗ(A − Ā₀ᵍ)‖ / (2·sup‖A‖·T₀)`.
    #[serde(rename = "lemma1_ratio")]
    Lemma1Ratio,
}

impl Measured {
    pub fn name(self) -> &'static str {
        match self {
            Measured::C1Deviation => "c1_deviation",
            Measured::C2UDeviation => "c2U_deviation",
            Measured::C2UDeviationBase0 => "c2U_deviation_base0",
            Measured::C1TildeDeviation => "c1_tilde_deviation",
            Measured::Avg1Magnitude => "avg1_magnitude",
            Measured::Avg2Magnitude => "avg2_magnitude",
            Measured::Avg2MagnitudeSplit => "avg2_magnitude_split",
            Measured::NormalformDefect => "normalform_defect",
            Measured::EffectiveNorm => "effective_norm",
            Measured::InNorm => "In_norm",
            Measured::SlowResidual => "slow_residual",
            Measured::FastAverage => "fast_average",
            Measured::Lemma1Ratio => "lemma1_ratio",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemRef {
    Family {
        family: Family,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_terms")]
        terms: usize,
    },
    /// A problem file; relative paths resolve against the sweep file's directory.
    File { path: PathBuf },
    /// A fixed hermitian matrix with entries `(i + j) + i(i − j)`, symmetrized.
    Constant {
        #[serde(default = "default_dim")]
        dim: usize,
    },
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

fn default_terms() -> usize {
    DEFAULT_TERMS
}

fn default_repeats() -> usize {
    5
}

fn default_grid() -> usize {
    200
}

fn default_oracle_tol() -> f64 {
    1e-10
}

fn default_theta() -> f64 {
    SplitConfig::DEFAULT_THETA
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub name: String,
    pub beta_values: Vec<f64>,
    pub problem: ProblemRef,
    pub window: Window,
    pub measured: Measured,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub expected_slope: f64,
    pub tolerance: f64,
    #[serde(default = "default_true")]
    pub gated: bool,
    #[serde(default = "default_grid")]
    pub grid_points: usize,
    #[serde(default = "default_oracle_tol")]
    pub oracle_tol: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub mode: NormalFormMode,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SweepSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut spec = Self::from_json(&std::fs::read_to_string(path)?)?;
        spec.base_dir = path.parent().map(Path::to_path_buf);
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.beta_values.len();
        if n < 3 {
            return Err(Error::InvalidConfig(format!("need at least 3 beta values, got {n}")));
        }
        if self
            .beta_values
            .iter()
            .any(|&b| !(b > 0.0 && b <= AveragingConfig::MAX_BETA))
        {
            return Err(Error::InvalidConfig("beta values must lie in (0, 0.1]".into()));
        }
        let lo = self.beta_values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.beta_values.iter().cloned().fold(0.0, f64::max);
        if (hi / lo).log10() < 1.5 - 1e-9 {
            return Err(Error::InvalidConfig(
                "beta values must span at least 1.5 decades".into(),
            ));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be positive".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidConfig("grid_points must be at least 2".into()));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        OracleConfig::with_tol(self.oracle_tol)?;
        SplitConfig::new(self.theta, 1.0)?;
        Ok(())
    }

    fn options(&self) -> MeasureOptions {
        MeasureOptions {
            oracle_tol: self.oracle_tol,
            grid_points: self.grid_points,
            theta: self.theta,
            mode: self.mode,
        }
    }

    pub fn problem(&self, beta: f64, seed: u64, repeat: usize) -> Result<SharedGenerator> {
        Ok(match &self.problem {
            ProblemRef::Family { family, dim, terms } => {
                Arc::new(random_problem(*family, *dim, *terms, beta, cell_seed(seed, repeat))?)
            }
            ProblemRef::File { path } => {
                let path = match &self.base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                Arc::new(ProblemFile::load(path)?.to_generator(false)?)
            }
            ProblemRef::Constant { dim } => Arc::new(constant_problem(*dim)?),
        })
    }
}

pub fn constant_problem(dim: usize) -> Result<ConstantGenerator> {
    let m = CMatrix::from_fn(dim, dim, |i, j| C64::new((i + j) as f64, i as f64 - j as f64));
    Ok(ConstantGenerator::new(HermitianMatrix::new(
        (&m + m.adjoint()) * C64::new(0.5, 0.0),
    )?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasureOptions {
    pub oracle_tol: f64,
    pub grid_points: usize,
    pub theta: f64,
    pub mode: NormalFormMode,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self {
            oracle_tol: 1e-10,
            grid_points: 200,
            theta: SplitConfig::DEFAULT_THETA,
            mode: NormalFormMode::Unitary,
        }
    }
}

fn grid(ti: f64, tf: f64, points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n).map(|k| ti + (tf - ti) * k as f64 / (n - 1) as f64).collect()
}

/// Averaging configuration covering `[0, tf]`.
fn config_for(beta: f64, tf: f64) -> Result<AveragingConfig> {
    AveragingConfig::new(beta, tf.max(f64::MIN_POSITIVE))
}

/// Oracle propagators at `times`, integrated from 0.
fn oracle_flow(
    gen: &dyn Generator,
    beta: f64,
    times: &[f64],
    opts: &MeasureOptions,
) -> Result<Vec<crate::matcore::UnitaryMatrix>> {
    let mut all = Vec::with_capacity(times.len() + 1);
    all.push(0.0);
    all.extend_from_slice(times);
    let mut flows = evolve_grid(gen, beta, &all, &OracleConfig::with_tol(opts.oracle_tol)?)?;
    flows.remove(0);
    Ok(flows)
}

fn max_deviation(mats: &[CMatrix]) -> f64 {
    mats.iter().map(|m| spectral_norm(&(m - &mats[0]))).fold(0.0, f64::max)
}

/// `sup_{Tᵢ≤t≤T_f}‖c₁(t) − c₁(Tᵢ)‖` over unit initial states, with
/// `c₁ = U₀⁻¹c` and `c` from the oracle.
pub fn theorem1_deviation(gen: &dyn Generator, beta: f64, ti: f64, tf: f64, opts: &MeasureOptions) -> Result<f64> {
    if tf <= ti {
        return Ok(0.0);
    }
    let cfg = config_for(beta, tf)?;
    let u0 = build_propagator(Arc::new(global_average(gen, &cfg)?), beta)?;
    let times = grid(ti, tf, opts.grid_points);
    let flows = oracle_flow(gen, beta, &times, opts)?;
    let w = times
        .iter()
        .zip(&flows)
        .map(|(&t, u)| Ok(u0.inverse_at(t)?.matrix() * u.matrix()))
        .collect::<Result<Vec<_>>>()?;
    Ok(max_deviation(&w))
}

/// Deviation of the stage-one normal-form state over `[Tᵢ, T_f]`.
///
/// `base_time` is where the map's kernel starts; `kernel` selects
/// `c₂ᵁ = ŨU₁⁻¹U₀⁻¹c` (residual) or `c̃₁ = ŨU₀⁻¹c` (direct).
pub fn normal_form_deviation(
    gen: SharedGenerator,
    beta: f64,
    ti: f64,
    tf: f64,
    base_time: f64,
    kernel: KernelKind,
    opts: &MeasureOptions,
) -> Result<f64> {
    if tf <= ti {
        return Ok(0.0);
    }
    let cfg = config_for(beta, tf)?;
    let mode = match kernel {
        KernelKind::Residual => opts.mode,
        KernelKind::Direct => NormalFormMode::Affine,
    };
    let (levels, map) = stage_one(gen.clone(), &cfg, base_time, mode, kernel)?;
    let times = grid(ti, tf, opts.grid_points);
    let flows = oracle_flow(gen.as_ref(), beta, &times, opts)?;
    let w = times
        .iter()
        .zip(&flows)
        .map(|(&t, u)| {
            let c1 = levels[0].propagator.inverse_at(t)?.matrix() * u.matrix();
            let inner = match kernel {
                KernelKind::Residual => levels[1].propagator.inverse_at(t)?.matrix() * c1,
                KernelKind::Direct => c1,
            };
            Ok(map.transform(t)? * inner)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(max_deviation(&w))
}

/// The direct-kernel variant `c̃₁ = (I + iβ∫_{Tᵢ}^{t}A₁)c₁`.
pub fn theorem2_deviation(gen: SharedGenerator, beta: f64, ti: f64, tf: f64, opts: &MeasureOptions) -> Result<f64> {
    normal_form_deviation(gen, beta, ti, tf, ti, KernelKind::Direct, opts)
}

fn hierarchy_for(gen: SharedGenerator, beta: f64, tf: f64, depth: usize) -> Result<Vec<HierarchyLevel>> {
    build_hierarchy(gen, &config_for(beta, tf)?, depth)
}

/// `max_n‖Āₗ⁽ⁿ⁾‖` for level `l ∈ {1, 2}` over `[0, T_f]`.
pub fn avg_magnitude(gen: SharedGenerator, beta: f64, tf: f64, level: usize) -> Result<f64> {
    let levels = hierarchy_for(gen, beta, tf, level)?;
    Ok(levels[level].avg_magnitude)
}

fn split_parts(
    gen: &SharedGenerator,
    beta: f64,
    theta: f64,
) -> Result<(QuasiperiodicGenerator, QuasiperiodicGenerator)> {
    let file = quasiperiodic_of(gen)?;
    Ok(split_frequencies(&file, &SplitConfig::new(theta, beta.powf(-0.5))?))
}

fn quasiperiodic_of(gen: &SharedGenerator) -> Result<QuasiperiodicGenerator> {
    gen.as_quasiperiodic()
        .cloned()
        .ok_or_else(|| Error::InvalidConfig("measurement needs a quasiperiodic problem".into()))
}

/// Max sampled `‖∫₀ᵗ(A^> − Ā^{>g})‖` of the slow part over `[0, T_f]`.
pub fn slow_residual(gen: &SharedGenerator, beta: f64, tf: f64, theta: f64) -> Result<f64> {
    let (slow, _) = split_parts(gen, beta, theta)?;
    let level = HierarchyLevel::base(Arc::new(slow), &config_for(beta, tf)?)?;
    Ok(level.residual_integral_bound)
}

/// `max_n‖Ā^{<(n)}‖` of the fast part over `[0, T_f]`.
pub fn fast_average(gen: &SharedGenerator, beta: f64, tf: f64, theta: f64) -> Result<f64> {
    let (_, fast) = split_parts(gen, beta, theta)?;
    Ok(global_average(&fast, &config_for(beta, tf)?)?.max_norm())
}

/// Sampled `sup‖A(t)‖` on `points` equally spaced times of `[0, tf]`.
pub fn sampled_sup_norm(gen: &dyn Generator, tf: f64, points: usize) -> Result<f64> {
    grid(0.0, tf, points)
        .into_iter()
        .try_fold(0.0f64, |m, t| Ok(m.max(spectral_norm(&gen.evaluate(t)?))))
}

#[derive(Clone, Debug, Serialize)]
pub struct LemmaCheck {
    pub name: String,
    pub measured: f64,
    pub allowed: f64,
    pub pass: bool,
}

/// Residual-integral bound with the literal constant 2 at `samples` times
/// drawn from `[0, T_f]`, plus block-boundary cancellation.
pub fn lemma_bounds_check(
    gen: &dyn Generator,
    beta: f64,
    tf: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<LemmaCheck>> {
    let cfg = config_for(beta, tf)?;
    let avg = global_average(gen, &cfg)?;
    let sup = sampled_sup_norm(gen, tf, 4000)?;
    let allowed = 2.0 * sup * cfg.t0();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let t = rng.random::<f64>() * tf;
        worst = worst.max(spectral_norm(&residual_integral(gen, &avg, cfg.quadrature(), t)?));
    }
    // ∫₀^{nT₀} A against T₀·Σ Ā⁽ᵏ⁾, with the integral taken in closed form
    // when the generator has one.
    let closed = gen.as_quasiperiodic();
    let t0 = cfg.t0();
    let mut blocks_sum = CMatrix::zeros(gen.dim(), gen.dim());
    let mut boundary: f64 = 0.0;
    for (k, b) in avg.blocks().iter().enumerate() {
        let end = (k + 1) as f64 * t0;
        if end > tf {
            break;
        }
        blocks_sum += b.matrix() * C64::new(t0, 0.0);
        let direct = match closed {
            Some(q) => q.analytic_integral(end),
            None => {
                let scale = gen.norm_bound() * end;
                cfg.quadrature()
                    .integrate(|s| gen.evaluate(s), 0.0, end, gen.max_frequency(), scale)?
                    .value
            }
        };
        boundary = boundary.max(spectral_norm(&(direct - &blocks_sum)));
    }
    Ok(vec![
        LemmaCheck {
            name: "residual_bound".into(),
            measured: worst,
            allowed,
            pass: worst <= allowed,
        },
        LemmaCheck {
            name: "block_boundary".into(),
            measured: boundary,
            allowed: 1e-9,
            pass: boundary <= 1e-9,
        },
    ])
}

/// One measurement of `measured` on `gen` at `beta` over `[Tᵢ, T_f]`.
pub fn measure(
    measured: Measured,
    gen: SharedGenerator,
    beta: f64,
    ti: f64,
    tf: f64,
    opts: &MeasureOptions,
) -> Result<f64> {
    match measured {
        Measured::C1Deviation => theorem1_deviation(gen.as_ref(), beta, ti, tf, opts),
        Measured::C2UDeviation => normal_form_deviation(gen, beta, ti, tf, ti, KernelKind::Residual, opts),
        Measured::C2UDeviationBase0 => normal_form_deviation(gen, beta, ti, tf, 0.0, KernelKind::Residual, opts),
        Measured::C1TildeDeviation => theorem2_deviation(gen, beta, ti, tf, opts),
        Measured::Avg1Magnitude => avg_magnitude(gen, beta, tf, 1),
        Measured::Avg2Magnitude | Measured::Avg2MagnitudeSplit => avg_magnitude(gen, beta, tf, 2),
        Measured::NormalformDefect | Measured::EffectiveNorm => {
            let (_, map) = stage_one(gen, &config_for(beta, tf)?, ti, opts.mode, KernelKind::Residual)?;
            grid(ti, tf, opts.grid_points).into_iter().try_fold(0.0f64, |m, t| {
                let v = if measured == Measured::NormalformDefect {
                    map.closeness(t)?
                } else {
                    spectral_norm(&effective_generator(&map, t)?)
                };
                Ok(m.max(v))
            })
        }
        Measured::InNorm => {
            let cfg = config_for(beta, tf)?;
            let levels = build_hierarchy(gen, &cfg, 1)?;
            grid(ti, tf, opts.grid_points).into_iter().try_fold(0.0f64, |m, t| {
                Ok(m.max(diagnostic_in(&levels[1], cfg.quadrature(), t)?.1))
            })
        }
        Measured::SlowResidual => slow_residual(&gen, beta, tf, opts.theta),
        Measured::FastAverage => fast_average(&gen, beta, tf, opts.theta),
        Measured::Lemma1Ratio => {
            let cfg = config_for(beta, tf)?;
            let avg = global_average(gen.as_ref(), &cfg)?;
            let sup = sampled_sup_norm(gen.as_ref(), tf, 4000)?;
            let worst = grid(ti, tf, opts.grid_points).into_iter().try_fold(0.0f64, |m, t| {
                Ok::<f64, Error>(m.max(spectral_norm(&residual_integral(
                    gen.as_ref(),
                    &avg,
                    cfg.quadrature(),
                    t,
                )?)))
            })?;
            Ok(worst / (2.0 * sup * cfg.t0()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

/// Least squares of `log(value)` against `log(beta)` over the positive,
/// finite points.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(b, v)| *b > 0.0 && *v > 0.0 && v.is_finite())
        .map(|(b, v)| (b.ln(), v.ln()))
        .collect();
    let n = pts.len();
    if n < 3 {
        return Err(Error::InsufficientPoints(n));
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientPoints(1));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let stderr = (ssr / (nf - 2.0) / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        stderr,
        intercept,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub beta: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub name: String,
    pub measured: String,
    pub points: Vec<ScalingPoint>,
    /// `β` values whose measurements were all zero; excluded from the fit.
    pub degenerate: Vec<f64>,
    pub fitted_slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub fitted_log_constant: Option<f64>,
    pub expected_slope: f64,
    pub tolerance: f64,
    pub gated: bool,
    pub pass: bool,
    pub note: Option<String>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Measurements at or below this are rounding noise and count as zero.
pub const DEGENERATE_FLOOR: f64 = 1e-12;

/// Aggregates `(beta, value)` samples into medians and fits them.
pub fn build_report(
    name: &str,
    measured: &str,
    samples: &[(f64, f64)],
    expected_slope: f64,
    tolerance: f64,
    gated: bool,
) -> ScalingReport {
    let mut betas: Vec<f64> = samples.iter().map(|s| s.0).collect();
    betas.sort_by(|a, b| b.total_cmp(a));
    betas.dedup();
    let mut points = Vec::new();
    let mut degenerate = Vec::new();
    for &b in &betas {
        let mut vals: Vec<f64> = samples
            .iter()
            .filter(|s| s.0 == b && s.1 > DEGENERATE_FLOOR)
            .map(|s| s.1)
            .collect();
        if vals.is_empty() {
            degenerate.push(b);
            continue;
        }
        vals.sort_by(f64::total_cmp);
        points.push(ScalingPoint {
            beta: b,
            median: median(&vals),
            min: vals[0],
            max: vals[vals.len() - 1],
        });
    }
    let fit = fit_slope(&points.iter().map(|p| (p.beta, p.median)).collect::<Vec<_>>());
    let (fitted_slope, slope_stderr, fitted_log_constant, pass, note) = match fit {
        Ok(f) => {
            let pass = (f.slope - expected_slope).abs() <= tolerance && f.stderr <= tolerance / 2.0;
            (Some(f.slope), Some(f.stderr), Some(f.intercept), pass, None)
        }
        Err(e) => (None, None, None, false, Some(e.to_string())),
    };
    ScalingReport {
        name: name.to_string(),
        measured: measured.to_string(),
        points,
        degenerate,
        fitted_slope,
        slope_stderr,
        fitted_log_constant,
        expected_slope,
        tolerance,
        gated,
        pass,
        note,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RawRow {
    pub beta: f64,
    pub repeat: usize,
    pub t_i: f64,
    pub t_f: f64,
    pub measured_name: String,
    /// NaN when the cell failed.
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<RawRow>,
    pub report: ScalingReport,
    /// `(beta, repeat, error)` for failed cells.
    pub failures: Vec<(f64, usize, String)>,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && (self.report.pass || !self.report.gated)
    }
}

/// Runs every `(β, repeat)` cell in parallel and reduces in canonical order.
pub fn run_experiment(spec: &SweepSpec, seed: u64) -> Result<ExperimentOutput> {
    spec.validate()?;
    let opts = spec.options();
    let cells: Vec<(f64, usize)> = spec
        .beta_values
        .iter()
        .flat_map(|&b| (0..spec.repeats).map(move |r| (b, r)))
        .collect();
    let results: Vec<(f64, usize, f64, f64, Result<f64>)> = cells
        .par_iter()
        .map(|&(beta, repeat)| {
            let window = spec.window.resolve(beta);
            match window {
                Ok((ti, tf)) => {
                    let value = spec
                        .problem(beta, seed, repeat)
                        .and_then(|g| measure(spec.measured, g, beta, ti, tf, &opts));
                    (beta, repeat, ti, tf, value)
                }
                Err(e) => (beta, repeat, f64::NAN, f64::NAN, Err(e)),
            }
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    let mut samples = Vec::new();
    for (beta, repeat, t_i, t_f, value) in results {
        let value = match value {
            Ok(v) => {
                samples.push((beta, v));
                v
            }
            Err(e) => {
                failures.push((beta, repeat, e.to_string()));
                f64::NAN
            }
        };
        rows.push(RawRow {
            beta,
            repeat,
            t_i,
            t_f,
            measured_name: spec.measured.name().to_string(),
            value,
        });
    }
    let mut report = build_report(
        &spec.name,
        spec.measured.name(),
        &samples,
        spec.expected_slope,
        spec.tolerance,
        spec.gated,
    );
    if !failures.is_empty() {
        report.pass = false;
        report.note = Some(format!("{} cell(s) failed", failures.len()));
    }
    Ok(ExperimentOutput { rows, report, failures })
}

/// Raw rows as CSV with columns `beta, repeat, t_i, t_f, measured_name,
/// value`.
pub fn rows_to_csv(rows: &[RawRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidConfig(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_tokens() {
        assert_eq!("1/beta".parse::<TimeToken>().unwrap().resolve(1e-3), 1000.0);
        assert_eq!("1/sqrt(beta)".parse::<TimeToken>().unwrap().resolve(1e-2), 10.0);
        assert_eq!("2.5/beta".parse::<TimeToken>().unwrap().resolve(0.1), 25.0);
        assert_eq!("1".parse::<TimeToken>().unwrap(), TimeToken::Literal(1.0));
        assert!("1/gamma".parse::<TimeToken>().is_err());
        let w: Window = serde_json::from_str(r#"{"t_i": 0, "t_f": "1/beta"}"#).unwrap();
        assert_eq!(w.resolve(1e-3).unwrap(), (0.0, 1000.0));
    }

    #[test]
    fn fit_slope_examples() {
        let exact: Vec<_> = DEFAULT_BETAS.iter().map(|&b| (b, b)).collect();
        let f = fit_slope(&exact).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && f.stderr < 1e-12);
        let flat: Vec<_> = DEFAULT_BETAS.iter().map(|&b| (b, 7.0)).collect();
        assert!(fit_slope(&flat).unwrap().slope.abs() < 1e-12);
        let noise = [0.3, -0.8, 0.5, -0.1];
        let noisy: Vec<_> = DEFAULT_BETAS
            .iter()
            .zip(noise)
            .map(|(&b, e)| (b, 3.0 * b.sqrt() * (1.0 + 0.01 * e)))
            .collect();
        let s = fit_slope(&noisy).unwrap().slope;
        assert!((0.45..=0.55).contains(&s));
        assert!(matches!(
            fit_slope(&[(0.1, 1.0), (0.01, 0.0), (0.001, 2.0)]),
            Err(Error::InsufficientPoints(2))
        ));
    }

    #[test]
    fn report_excludes_degenerate_points() {
        let samples = [(1e-2, 0.0), (1e-2, 0.0), (1e-3, 0.0)];
        let r = build_report("z", "c1_deviation", &samples, 0.5, 0.1, true);
        assert!(r.points.is_empty());
        assert_eq!(r.degenerate, vec![1e-2, 1e-3]);
        assert!(!r.pass && r.note.is_some());
    }

    #[test]
    fn report_uses_medians() {
        let samples: Vec<_> = DEFAULT_BETAS
            .iter()
            .flat_map(|&b| [(b, b.sqrt()), (b, 100.0 * b.sqrt()), (b, 2.0 * b.sqrt())])
            .collect();
        let r = build_report("m", "x", &samples, 0.5, 0.1, true);
        assert!((r.points[0].median - 2.0 * 0.1).abs() < 1e-12);
        assert!((r.fitted_slope.unwrap() - 0.5).abs() < 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn problems_share_draws_across_beta() {
        let a = random_problem(Family::Scaled, 4, 8, 1e-2, 7).unwrap();
        let b = random_problem(Family::Scaled, 4, 8, 1e-3, 7).unwrap();
        for (x, y) in a.terms().iter().zip(b.terms()) {
            assert_eq!(x.amplitude, y.amplitude);
            assert!((x.omega / y.omega - 10f64.sqrt()).abs() < 1e-12);
        }
        for (j, t) in a.terms().iter().enumerate() {
            assert!((spectral_norm(&t.amplitude) - ((j + 1) as f64).powf(-1.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn split_regime_frequencies() {
        let p = random_problem(Family::SplitRegime, 4, 8, 1e-3, 3).unwrap();
        for t in &p.terms()[..4] {
            assert!((0.5..=5.0).contains(&t.omega));
        }
        for t in &p.terms()[4..] {
            assert!((1e-4..=1e-3).contains(&t.omega));
        }
    }

    #[test]
    fn spec_validation() {
        let ok = r#"{"name":"t","beta_values":[1e-2,1e-3,1e-4],"problem":{"kind":"constant"},
            "window":{"t_i":0,"t_f":"1/beta"},"measured":"c1_deviation","expected_slope":0.5,"tolerance":0.1}"#;
        let spec = SweepSpec::from_json(ok).unwrap();
        assert_eq!(spec.repeats, 5);
        assert_eq!(spec.grid_points, 200);
        let narrow = ok.replace("1e-4", "5e-3");
        assert!(SweepSpec::from_json(&narrow).is_err());
        let big = ok.replace("1e-2", "0.5");
        assert!(SweepSpec::from_json(&big).is_err());
    }

    #[test]
    fn constant_problem_is_degenerate() {
        let spec = SweepSpec::from_json(
            r#"{"name":"c","beta_values":[1e-2,1e-3,3e-4],"problem":{"kind":"constant","dim":3},
            "window":{"t_i":0,"t_f":"0.2/beta"},"measured":"c1_deviation","repeats":1,"grid_points":20,
            "expected_slope":0.5,"tolerance":0.1}"#,
        )
        .unwrap();
        let out = run_experiment(&spec, 1).unwrap();
        assert!(out.failures.is_empty());
        assert!(out.rows.iter().all(|r| r.value < 1e-10));
        assert_eq!(out.report.degenerate.len(), 3);
        assert!(out.report.fitted_slope.is_none() && !out.report.pass);
    }

    #[test]
    fn zero_length_window() {
        let g: SharedGenerator = Arc::new(random_problem(Family::Scaled, 3, 4, 1e-2, 1).unwrap());
        assert_eq!(
            theorem1_deviation(g.as_ref(), 1e-2, 5.0, 5.0, &MeasureOptions::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn runs_are_deterministic() {
        let spec = SweepSpec::from_json(
            r#"{"name":"d","beta_values":[1e-2,3e-3,1e-3,3e-4],"problem":{"kind":"family","family":"scaled","dim":3,"terms":4},
            "window":{"t_i":0,"t_f":"1/sqrt(beta)"},"measured":"avg1_magnitude","repeats":2,
            "expected_slope":0.5,"tolerance":0.1}"#,
        )
        .unwrap();
        let a = rows_to_csv(&run_experiment(&spec, 42).unwrap().rows).unwrap();
        let b = rows_to_csv(&run_experiment(&spec, 42).unwrap().rows).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("beta,repeat,t_i,t_f,measured_name,value\n"));
    }
}
