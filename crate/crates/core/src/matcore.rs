//! Dense complex linear algebra for small hermitian generators.
//!
//! Exponentials are taken through the hermitian eigendecomposition, so every
//! factor `e^{-isH}` is unitary up to rounding. Norms used for acceptance
//! thresholds are spectral norms; the Frobenius norm is only used for cheap
//! screening inside constructors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub use nalgebra::Complex;
pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Relative hermiticity tolerance accepted by [`HermitianMatrix`] constructors.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Per-dimension unitarity tolerance accepted by [`UnitaryMatrix::new`].
pub const UNITARY_TOL: f64 = 1e-10;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn frobenius_norm(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest singular value.
pub fn spectral_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Spectral norm of a matrix known to be hermitian (max |eigenvalue|).
fn hermitian_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    match SymmetricEigen::try_new(m.clone(), EIGEN_EPS, EIGEN_MAX_ITER) {
        Some(eig) => eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max),
        None => spectral_norm(m),
    }
}

fn assert_square(m: &CMatrix) {
    assert_eq!(m.nrows(), m.ncols(), "square matrix required");
}

/// `‖M − M†‖` in the spectral norm.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    assert_square(m);
    // i(M − M†) is hermitian, so its spectral norm is its spectral radius.
    let d = (m - m.adjoint()) * C64::i();
    hermitian_norm(&d)
}

pub fn hermiticity_defect_frobenius(m: &CMatrix) -> f64 {
    assert_square(m);
    let n = m.nrows();
    let mut sum = 0.0;
    for j in 0..n {
        for i in 0..n {
            sum += (m[(i, j)] - m[(j, i)].conj()).norm_sqr();
        }
    }
    sum.sqrt()
}

/// `‖U†U − I‖` in the spectral norm.
pub fn unitarity_defect(u: &CMatrix) -> f64 {
    assert_square(u);
    let d = u.adjoint() * u - identity(u.nrows());
    hermitian_norm(&d)
}

fn all_finite(m: &CMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// A dense hermitian matrix.
///
/// Construction validates the hermiticity defect against a scale and then
/// stores the exact hermitian part, so downstream eigendecompositions see a
/// structurally hermitian input.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianMatrix {
    m: CMatrix,
}

impl HermitianMatrix {
    /// Validates `‖M − M†‖_F ≤ 1e-12·‖M‖_F`.
    pub fn new(m: CMatrix) -> Result<Self> {
        let scale = frobenius_norm(&m);
        Self::with_scale(m, scale)
    }

    /// Validates `‖M − M†‖_F ≤ 1e-12·max(‖M‖_F, scale)`.
    ///
    /// Use when `M` is a small difference or average of much larger hermitian
    /// values and rounding is absolute in the size of those inputs.
    pub fn with_scale(m: CMatrix, scale: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidConfig("empty matrix".into()));
        }
        if !all_finite(&m) {
            return Err(Error::NumericDomain("non-finite matrix entry".into()));
        }
        let defect = hermiticity_defect_frobenius(&m);
        let allowed = HERMITIAN_TOL * frobenius_norm(&m).max(scale);
        if defect > allowed {
            return Err(Error::NotHermitian { defect, allowed });
        }
        let mut m = m;
        let n = m.nrows();
        for j in 0..n {
            m[(j, j)].im = 0.0;
            for i in j + 1..n {
                let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
                m[(i, j)] = avg;
                m[(j, i)] = avg.conj();
            }
        }
        Ok(Self { m })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            m: CMatrix::zeros(n, n),
        }
    }

    pub fn from_real_diagonal(d: &[f64]) -> Self {
        let v = DVector::from_iterator(d.len(), d.iter().map(|&x| C64::new(x, 0.0)));
        Self {
            m: CMatrix::from_diagonal(&v),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn norm(&self) -> f64 {
        hermitian_norm(&self.m)
    }

    pub fn eigen(&self) -> Result<SpectralDecomposition> {
        SpectralDecomposition::new(self)
    }
}

/// Eigendecomposition `H = V diag(λ) V†`, reusable for many exponentials.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    values: DVector<f64>,
    vectors: CMatrix,
}

impl SpectralDecomposition {
    pub fn new(h: &HermitianMatrix) -> Result<Self> {
        let eig = SymmetricEigen::try_new(h.m.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
            .ok_or_else(|| Error::NumericDomain("hermitian eigendecomposition failed".into()))?;
        Ok(Self {
            values: eig.eigenvalues,
            vectors: eig.eigenvectors,
        })
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn eigenvectors(&self) -> &CMatrix {
        &self.vectors
    }

    pub fn spectral_radius(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// `e^{-isH}`.
    pub fn exp(&self, s: f64) -> UnitaryMatrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &lambda) in self.values.iter().enumerate() {
            let phase = C64::from_polar(1.0, -s * lambda);
            for i in 0..n {
                scaled[(i, j)] *= phase;
            }
        }
        let u = scaled * self.vectors.adjoint();
        // One Newton–Schulz polar step, U(3I − U†U)/2: the eigenvectors are
        // orthonormal only to ~1e-15 and that defect is systematic, so long
        // products of exponentials would otherwise drift off the group.
        let gram = u.adjoint() * &u;
        let corr = (identity(n) * C64::new(3.0, 0.0) - gram) * C64::new(0.5, 0.0);
        UnitaryMatrix { m: u * corr }
    }
}

/// `e^{-isH}` by spectral decomposition.
pub fn hermitian_exp(h: &HermitianMatrix, s: f64) -> Result<UnitaryMatrix> {
    if !s.is_finite() {
        return Err(Error::NumericDomain(format!("non-finite exponent scale {s}")));
    }
    Ok(h.eigen()?.exp(s))
}

/// A dense unitary matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitaryMatrix {
    m: CMatrix,
}

impl UnitaryMatrix {
    /// Validates `‖U†U − I‖ ≤ 1e-10·N`.
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if !all_finite(&m) {
            return Err(Error::NumericDomain("non-finite matrix entry".into()));
        }
        let defect = unitarity_defect(&m);
        let allowed = UNITARY_TOL * m.nrows() as f64;
        if defect > allowed {
            return Err(Error::NotUnitary { defect, allowed });
        }
        Ok(Self { m })
    }

    /// Wraps a product of unitary factors without re-validating it.
    pub(crate) fn from_product(m: CMatrix) -> Self {
        Self { m }
    }

    pub fn identity(n: usize) -> Self {
        Self { m: identity(n) }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn inverse(&self) -> Self {
        Self { m: self.m.adjoint() }
    }

    pub fn compose(&self, rhs: &UnitaryMatrix) -> Self {
        Self { m: &self.m * &rhs.m }
    }

    pub fn apply(&self, v: &StateVector) -> StateVector {
        StateVector { v: &self.m * &v.v }
    }

    pub fn defect(&self) -> f64 {
        unitarity_defect(&self.m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    v: CVector,
}

impl StateVector {
    pub fn new(v: CVector) -> Result<Self> {
        if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NumericDomain("non-finite state entry".into()));
        }
        Ok(Self { v })
    }

    /// Unit vector `e_k`.
    pub fn basis(n: usize, k: usize) -> Self {
        let mut v = CVector::zeros(n);
        v[k] = C64::new(1.0, 0.0);
        Self { v }
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn vector(&self) -> &CVector {
        &self.v
    }

    pub fn norm(&self) -> f64 {
        self.v.norm()
    }

    pub fn distance(&self, other: &StateVector) -> f64 {
        (&self.v - &other.v).norm()
    }

    pub fn transform(&self, m: &CMatrix) -> Result<StateVector> {
        if m.ncols() != self.v.len() {
            return Err(Error::DimensionMismatch {
                expected: self.v.len(),
                found: m.ncols(),
            });
        }
        Ok(StateVector { v: m * &self.v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> CMatrix {
        CMatrix::from_fn(n, n, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, n: usize) -> HermitianMatrix {
        let m = random_matrix(rng, n);
        HermitianMatrix::new((&m + m.adjoint()) * C64::new(0.5, 0.0)).unwrap()
    }

    /// Independent reference: Taylor series with scaling and squaring.
    fn taylor_exp(h: &CMatrix, s: f64) -> CMatrix {
        let n = h.nrows();
        let x = h * C64::new(0.0, -s);
        let norm = frobenius_norm(&x);
        let squarings = if norm > 0.5 {
            (norm / 0.5).log2().ceil() as u32
        } else {
            0
        };
        let xs = &x / C64::new(2f64.powi(squarings as i32), 0.0);
        let mut term = identity(n);
        let mut sum = identity(n);
        for k in 1..40 {
            term = &term * &xs / C64::new(k as f64, 0.0);
            sum += &term;
        }
        for _ in 0..squarings {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let u = hermitian_exp(&HermitianMatrix::zeros(3), 7.2).unwrap();
        assert!((u.matrix() - identity(3)).norm() < 1e-15);
    }

    #[test]
    fn exp_of_diagonal_at_pi() {
        let h = HermitianMatrix::from_real_diagonal(&[1.0, 2.0]);
        let u = hermitian_exp(&h, PI).unwrap();
        let expected = CMatrix::from_diagonal(&CVector::from_vec(vec![C64::new(-1.0, 0.0), C64::new(1.0, 0.0)]));
        assert!(spectral_norm(&(u.matrix() - expected)) < 1e-14);
    }

    #[test]
    fn exp_matches_taylor_series_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let h = random_hermitian(&mut rng, 4);
            let u = hermitian_exp(&h, 0.3).unwrap();
            let reference = taylor_exp(h.matrix(), 0.3);
            assert!(spectral_norm(&(u.matrix() - reference)) < 1e-12);
        }
    }

    #[test]
    fn exp_rejects_non_finite_scale() {
        let h = HermitianMatrix::from_real_diagonal(&[1.0]);
        assert!(matches!(hermitian_exp(&h, f64::NAN), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn hermitian_constructor_rejects_non_finite_and_non_hermitian() {
        let mut m = identity(2);
        m[(0, 1)] = C64::new(f64::INFINITY, 0.0);
        assert!(matches!(HermitianMatrix::new(m), Err(Error::NumericDomain(_))));
        let mut m = identity(2);
        m[(0, 1)] = C64::new(1.0, 0.0);
        assert!(matches!(HermitianMatrix::new(m), Err(Error::NotHermitian { .. })));
    }

    #[test]
    fn hermiticity_defect_spectral_examples() {
        let d = CMatrix::from_diagonal(&CVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(2.0, 0.0)]));
        assert_eq!(hermiticity_defect(&d), 0.0);
        let mut n = CMatrix::zeros(2, 2);
        n[(0, 1)] = C64::new(1.0, 0.0);
        assert!((hermiticity_defect(&n) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hermiticity_defect_spectral_of_small_antihermitian_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = random_hermitian(&mut rng, 4);
            let k = random_matrix(&mut rng, 4);
            let anti = (&k - k.adjoint()) * C64::new(0.5, 0.0);
            let m = h.matrix() + anti * C64::new(1e-6, 0.0);
            let d = hermiticity_defect(&m);
            assert!((1e-7..=1e-5).contains(&d), "defect {d}");
        }
    }

    #[test]
    fn unitarity_defect_spectral_examples() {
        assert_eq!(unitarity_defect(&identity(3)), 0.0);
        let two = identity(2) * C64::new(2.0, 0.0);
        assert!((unitarity_defect(&two) - 3.0).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = hermitian_exp(&random_hermitian(&mut rng, 4), 1.0).unwrap();
        assert!(u.defect() <= 1e-12);
    }

    #[test]
    fn unitary_constructor_rejects_scaled_identity() {
        assert!(matches!(
            UnitaryMatrix::new(identity(2) * C64::new(2.0, 0.0)),
            Err(Error::NotUnitary { .. })
        ));
    }

    #[test]
    fn exp_inverse_and_group_law_spectral() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let h = random_hermitian(&mut rng, 4);
            let s: f64 = rng.random_range(-3.0..3.0);
            let u: f64 = rng.random_range(-3.0..3.0);
            let eig = h.eigen().unwrap();
            let prod = eig.exp(s).compose(&eig.exp(-s));
            assert!(spectral_norm(&(prod.matrix() - identity(4))) < 1e-12);
            let split = eig.exp(s).compose(&eig.exp(u));
            assert!(spectral_norm(&(split.matrix() - eig.exp(s + u).matrix())) < 1e-12);
            let v = StateVector::new(CVector::from_fn(4, |_, _| C64::new(rng.random(), rng.random()))).unwrap();
            assert!((eig.exp(s).apply(&v).norm() - v.norm()).abs() < 1e-12);
        }
    }
}
