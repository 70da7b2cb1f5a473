//! Reference propagators for `i dU/dt = βA(t)U` by adaptive exponential
//! midpoint steps, and generator recovery from sampled flows.

use crate::error::{Error, Result};
use crate::generators::Generator;
use crate::matcore::{frobenius_norm, hermitian_exp, identity, CMatrix, StateVector, UnitaryMatrix, C64};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    tol: f64,
    max_steps: usize,
    initial_step: f64,
}

impl OracleConfig {
    pub const MIN_TOL: f64 = 1e-14;
    pub const MAX_TOL: f64 = 1e-6;

    /// `tol` is the accepted local error per unit time.
    pub fn new(tol: f64, max_steps: usize, initial_step: f64) -> Result<Self> {
        if !(Self::MIN_TOL..=Self::MAX_TOL).contains(&tol) {
            return Err(Error::InvalidConfig(format!(
                "oracle tolerance {tol} outside [{}, {}]",
                Self::MIN_TOL,
                Self::MAX_TOL
            )));
        }
        if max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be positive".into()));
        }
        if !(initial_step > 0.0 && initial_step.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "initial step {initial_step} must be positive"
            )));
        }
        Ok(Self {
            tol,
            max_steps,
            initial_step,
        })
    }

    pub fn with_tol(tol: f64) -> Result<Self> {
        let d = Self::default();
        Self::new(tol, d.max_steps, d.initial_step)
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn initial_step(&self) -> f64 {
        self.initial_step
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_steps: 50_000_000,
            initial_step: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OracleStats {
    pub accepted: usize,
    pub rejected: usize,
    /// Sum of accepted local error estimates.
    pub error_estimate: f64,
}

const ROUNDING_FLOOR: f64 = 10.0 * f64::EPSILON;

/// `e^{−iβA(t)h}`.
fn midpoint_factor(gen: &dyn Generator, beta: f64, t: f64, h: f64) -> Result<CMatrix> {
    let a = gen.evaluate_hermitian(t)?;
    Ok(hermitian_exp(&a, beta * h)?.into_matrix())
}

/// Adaptive integrator state; carries the proposed step across calls so a
/// grid of output times does not reset the controller.
struct Stepper<'a> {
    gen: &'a dyn Generator,
    beta: f64,
    cfg: OracleConfig,
    h: f64,
    stats: OracleStats,
}

impl<'a> Stepper<'a> {
    fn new(gen: &'a dyn Generator, beta: f64, cfg: OracleConfig) -> Self {
        Self {
            gen,
            beta,
            cfg,
            h: cfg.initial_step,
            stats: OracleStats::default(),
        }
    }

    /// Advances `u` from `t0` to `t1`, never stepping across a breakpoint.
    fn advance(&mut self, u: &mut CMatrix, t0: f64, t1: f64) -> Result<()> {
        let mut start = t0;
        for end in self.gen.breakpoints(t0, t1).into_iter().chain(std::iter::once(t1)) {
            self.advance_smooth(u, start, end)?;
            start = end;
        }
        Ok(())
    }

    fn advance_smooth(&mut self, u: &mut CMatrix, t0: f64, t1: f64) -> Result<()> {
        let mut t = t0;
        let mut last_err = 0.0;
        while t < t1 {
            if self.stats.accepted + self.stats.rejected >= self.cfg.max_steps {
                return Err(Error::OracleMaxSteps {
                    steps: self.cfg.max_steps,
                    t_reached: t,
                    achieved: last_err,
                });
            }
            let remaining = t1 - t;
            let clipped = self.h >= remaining;
            let h = if clipped { remaining } else { self.h };
            let one = midpoint_factor(self.gen, self.beta, t + 0.5 * h, h)?;
            let first = midpoint_factor(self.gen, self.beta, t + 0.25 * h, 0.5 * h)?;
            let second = midpoint_factor(self.gen, self.beta, t + 0.75 * h, 0.5 * h)?;
            let two = second * first;
            // Local error is O(h³): the half-step pair carries a quarter of
            // the full step's error, i.e. a third of their gap.
            let err = frobenius_norm(&(&two - &one)) / 3.0;
            last_err = err;
            // Below ~10 ulp the estimate is rounding noise, not truncation.
            let allowed = (self.cfg.tol * h).max(ROUNDING_FLOOR);
            let factor = if err > 0.0 {
                (0.9 * (allowed / err).sqrt()).clamp(0.2, 2.0)
            } else {
                2.0
            };
            if err <= allowed {
                *u = two * &*u;
                t = if clipped { t1 } else { t + h };
                self.stats.accepted += 1;
                self.stats.error_estimate += err;
                // A step clipped to hit t1 says little about the natural size.
                if !clipped || factor < 1.0 {
                    self.h = h * factor;
                }
            } else {
                self.stats.rejected += 1;
                self.h = h * factor;
            }
        }
        Ok(())
    }
}

fn check_interval(t0: f64, t1: f64) -> Result<()> {
    if !(t0.is_finite() && t1.is_finite()) || t1 < t0 {
        return Err(Error::InvalidConfig(format!(
            "oracle interval [{t0}, {t1}] must be ordered and finite"
        )));
    }
    Ok(())
}

/// Time-ordered propagator from `t0` to `t1` with run statistics.
pub fn evolve_with_stats(
    gen: &dyn Generator,
    beta: f64,
    t0: f64,
    t1: f64,
    cfg: &OracleConfig,
) -> Result<(UnitaryMatrix, OracleStats)> {
    check_interval(t0, t1)?;
    let mut stepper = Stepper::new(gen, beta, *cfg);
    let mut u = identity(gen.dim());
    stepper.advance(&mut u, t0, t1)?;
    Ok((UnitaryMatrix::from_product(u), stepper.stats))
}

pub fn evolve(gen: &dyn Generator, beta: f64, t0: f64, t1: f64, cfg: &OracleConfig) -> Result<UnitaryMatrix> {
    evolve_with_stats(gen, beta, t0, t1, cfg).map(|(u, _)| u)
}

pub fn evolve_state(
    gen: &dyn Generator,
    beta: f64,
    c0: &StateVector,
    t0: f64,
    t1: f64,
    cfg: &OracleConfig,
) -> Result<StateVector> {
    if c0.dim() != gen.dim() {
        return Err(Error::DimensionMismatch {
            expected: gen.dim(),
            found: c0.dim(),
        });
    }
    Ok(evolve(gen, beta, t0, t1, cfg)?.apply(c0))
}

/// Propagators `U(times[k], times[0])` for a non-decreasing list of times,
/// integrated in one sweep.
pub fn evolve_grid(gen: &dyn Generator, beta: f64, times: &[f64], cfg: &OracleConfig) -> Result<Vec<UnitaryMatrix>> {
    let Some(&start) = times.first() else {
        return Ok(Vec::new());
    };
    let mut stepper = Stepper::new(gen, beta, *cfg);
    let mut u = identity(gen.dim());
    let mut out = Vec::with_capacity(times.len());
    let mut t = start;
    for &next in times {
        check_interval(t, next)?;
        stepper.advance(&mut u, t, next)?;
        out.push(UnitaryMatrix::from_product(u.clone()));
        t = next;
    }
    Ok(out)
}

/// Non-adaptive midpoint propagator with `steps` equal steps; used for order
/// checks.
pub fn evolve_fixed(gen: &dyn Generator, beta: f64, t0: f64, t1: f64, steps: usize) -> Result<UnitaryMatrix> {
    check_interval(t0, t1)?;
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be positive".into()));
    }
    let h = (t1 - t0) / steps as f64;
    let mut u = identity(gen.dim());
    for k in 0..steps {
        let mid = t0 + (k as f64 + 0.5) * h;
        u = midpoint_factor(gen, beta, mid, h)? * u;
    }
    Ok(UnitaryMatrix::from_product(u))
}

/// `A(t) ≈ i[U(t+h) − U(t−h)]/(2h)·U(t)⁻¹` at every interior sample.
pub fn recover_generator(samples: &[(f64, UnitaryMatrix)], h: f64) -> Result<Vec<(f64, CMatrix)>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::NonUniformGrid { h });
    }
    for w in samples.windows(2) {
        let gap = w[1].0 - w[0].0;
        if (gap - h).abs() > 1e-6 * h {
            return Err(Error::NonUniformGrid { h });
        }
    }
    let scale = C64::new(0.0, 1.0 / (2.0 * h));
    Ok(samples
        .windows(3)
        .map(|w| {
            let diff = w[2].1.matrix() - w[0].1.matrix();
            (w[1].0, diff * scale * w[1].1.inverse().matrix())
        })
        .collect())
}
