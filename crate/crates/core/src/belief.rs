//! Gaussian beliefs over weight space.
//!
//! A [`BeliefState`] is a mean vector plus one of three covariance payloads:
//! a full eigenfactorization `Σ = U diag(D) Uᵀ`, a per-coordinate variance
//! vector, or a single isotropic variance. The eigenfactor form is what the
//! full flow needs for whitening, so it is stored directly and refreshed after
//! every update.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Flattened model parameters.
pub type WeightVector<T> = DVector<T>;

/// Default eigenvalue / variance floor.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Maximum tolerated `‖UᵀU − I‖_max` before the eigenvectors are re-orthonormalized.
pub const ORTHONORMALITY_DRIFT: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("variance {value} at index {index} is not positive and finite")]
    InvalidVariance { index: usize, value: f64 },
    #[error("variance {value} at index {index} is below the floor {floor}")]
    BelowFloor { index: usize, value: f64, floor: f64 },
    #[error("mean has a non-finite entry at index {0}")]
    NonFiniteMean(usize),
    #[error("eigenvectors drifted from orthonormality by {0:e}")]
    NotOrthonormal(f64),
    #[error("covariance matrix is not symmetric")]
    NotSymmetric,
}

/// Covariance representation of a belief.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Diagonal,
    Spherical,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Diagonal => "diagonal",
            Variant::Spherical => "spherical",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance<T: Real> {
    /// `Σ = U diag(D) Uᵀ`; columns of `eigenvectors` are orthonormal.
    Full {
        eigenvectors: DMatrix<T>,
        eigenvalues: DVector<T>,
    },
    Diagonal {
        variances: DVector<T>,
    },
    Spherical {
        variance: T,
    },
}

impl<T: Real> Covariance<T> {
    pub fn variant(&self) -> Variant {
        match self {
            Covariance::Full { .. } => Variant::Full,
            Covariance::Diagonal { .. } => Variant::Diagonal,
            Covariance::Spherical { .. } => Variant::Spherical,
        }
    }
}

/// Gaussian belief `N(μ, Σ)` over a `d`-dimensional weight space.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState<T: Real> {
    mean: DVector<T>,
    covariance: Covariance<T>,
}

impl<T: Real> BeliefState<T> {
    /// `N(mean, variance · I)` in the requested representation.
    pub fn isotropic(variant: Variant, mean: DVector<T>, variance: T) -> Result<Self, BeliefError> {
        let d = mean.len();
        let covariance = match variant {
            Variant::Full => Covariance::Full {
                eigenvectors: DMatrix::identity(d, d),
                eigenvalues: DVector::from_element(d, variance),
            },
            Variant::Diagonal => Covariance::Diagonal {
                variances: DVector::from_element(d, variance),
            },
            Variant::Spherical => Covariance::Spherical { variance },
        };
        Self::new(mean, covariance)
    }

    pub fn diagonal(mean: DVector<T>, variances: DVector<T>) -> Result<Self, BeliefError> {
        Self::new(mean, Covariance::Diagonal { variances })
    }

    pub fn spherical(mean: DVector<T>, variance: T) -> Result<Self, BeliefError> {
        Self::new(mean, Covariance::Spherical { variance })
    }

    pub fn full(
        mean: DVector<T>,
        eigenvectors: DMatrix<T>,
        eigenvalues: DVector<T>,
    ) -> Result<Self, BeliefError> {
        Self::new(
            mean,
            Covariance::Full {
                eigenvectors,
                eigenvalues,
            },
        )
    }

    /// Full belief from a dense symmetric positive-definite covariance.
    pub fn from_covariance(mean: DVector<T>, covariance: DMatrix<T>) -> Result<Self, BeliefError> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(BeliefError::DimensionMismatch {
                expected: d,
                found: covariance.nrows(),
            });
        }
        let scale = covariance.amax().max(T::one());
        if (&covariance - covariance.transpose()).amax() > T::lit(1e-12) * scale {
            return Err(BeliefError::NotSymmetric);
        }
        let (eigenvectors, eigenvalues) = symmetric_eigen(covariance);
        Self::full(mean, eigenvectors, eigenvalues)
    }

    /// Validates shapes and positivity; no floor is enforced here.
    pub fn new(mean: DVector<T>, covariance: Covariance<T>) -> Result<Self, BeliefError> {
        let d = mean.len();
        if let Some(i) = mean.iter().position(|m| !m.is_finite()) {
            return Err(BeliefError::NonFiniteMean(i));
        }
        let check = |i: usize, v: T| {
            if v.is_finite() && v > T::zero() {
                Ok(())
            } else {
                Err(BeliefError::InvalidVariance {
                    index: i,
                    value: v.as_f64(),
                })
            }
        };
        match &covariance {
            Covariance::Full {
                eigenvectors,
                eigenvalues,
            } => {
                if eigenvalues.len() != d {
                    return Err(BeliefError::DimensionMismatch {
                        expected: d,
                        found: eigenvalues.len(),
                    });
                }
                if eigenvectors.nrows() != d || eigenvectors.ncols() != d {
                    return Err(BeliefError::DimensionMismatch {
                        expected: d,
                        found: eigenvectors.ncols(),
                    });
                }
                for (i, &v) in eigenvalues.iter().enumerate() {
                    check(i, v)?;
                }
            }
            Covariance::Diagonal { variances } => {
                if variances.len() != d {
                    return Err(BeliefError::DimensionMismatch {
                        expected: d,
                        found: variances.len(),
                    });
                }
                for (i, &v) in variances.iter().enumerate() {
                    check(i, v)?;
                }
            }
            Covariance::Spherical { variance } => check(0, *variance)?,
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variant(&self) -> Variant {
        self.covariance.variant()
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance<T> {
        &self.covariance
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut DVector<T>, &mut Covariance<T>) {
        (&mut self.mean, &mut self.covariance)
    }

    pub fn into_parts(self) -> (DVector<T>, Covariance<T>) {
        (self.mean, self.covariance)
    }

    /// Dense `Σ`.
    pub fn covariance_matrix(&self) -> DMatrix<T> {
        let d = self.dim();
        match &self.covariance {
            Covariance::Full {
                eigenvectors,
                eigenvalues,
            } => {
                let scaled = scale_columns(eigenvectors, eigenvalues.iter().copied());
                let mut s = &scaled * eigenvectors.transpose();
                symmetrize(&mut s);
                s
            }
            Covariance::Diagonal { variances } => DMatrix::from_diagonal(variances),
            Covariance::Spherical { variance } => DMatrix::from_diagonal_element(d, d, *variance),
        }
    }

    /// Dense `Σ⁻¹`.
    pub fn precision_matrix(&self) -> DMatrix<T> {
        let d = self.dim();
        match &self.covariance {
            Covariance::Full {
                eigenvectors,
                eigenvalues,
            } => {
                let scaled = scale_columns(eigenvectors, eigenvalues.iter().map(|&l| T::one() / l));
                let mut p = &scaled * eigenvectors.transpose();
                symmetrize(&mut p);
                p
            }
            Covariance::Diagonal { variances } => {
                DMatrix::from_diagonal(&variances.map(|v| T::one() / v))
            }
            Covariance::Spherical { variance } => {
                DMatrix::from_diagonal_element(d, d, T::one() / *variance)
            }
        }
    }

    /// Eigenvalues of `Σ` (variances for the axis-aligned variants).
    pub fn spectrum(&self) -> DVector<T> {
        match &self.covariance {
            Covariance::Full { eigenvalues, .. } => eigenvalues.clone(),
            Covariance::Diagonal { variances } => variances.clone(),
            Covariance::Spherical { variance } => DVector::from_element(self.dim(), *variance),
        }
    }

    pub fn log_det(&self) -> T {
        match &self.covariance {
            Covariance::Full { eigenvalues, .. } => eigenvalues.iter().map(|l| l.ln()).sum(),
            Covariance::Diagonal { variances } => variances.iter().map(|l| l.ln()).sum(),
            Covariance::Spherical { variance } => T::lit(self.dim() as f64) * variance.ln(),
        }
    }

    /// Differential entropy `½ log((2πe)^d det Σ)`.
    pub fn entropy(&self) -> T {
        let d = T::lit(self.dim() as f64);
        let c = T::one() + T::two_pi().ln();
        (d * c + self.log_det()) * T::lit(0.5)
    }

    /// Draws `μ + L ξ` with `L` the covariance factor of the stored representation.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightVector<T> {
        let mut out = DVector::zeros(self.dim());
        self.sample_into(rng, &mut out);
        out
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut DVector<T>) {
        let d = self.dim();
        assert_eq!(out.len(), d, "sample buffer has wrong dimension");
        match &self.covariance {
            Covariance::Full {
                eigenvectors,
                eigenvalues,
            } => {
                let xi = DVector::from_fn(d, |i, _| eigenvalues[i].sqrt() * standard_normal::<T, R>(rng));
                out.copy_from(&self.mean);
                out.gemv(T::one(), eigenvectors, &xi, T::one());
            }
            Covariance::Diagonal { variances } => {
                for i in 0..d {
                    out[i] = self.mean[i] + variances[i].sqrt() * standard_normal::<T, R>(rng);
                }
            }
            Covariance::Spherical { variance } => {
                let s = variance.sqrt();
                for i in 0..d {
                    out[i] = self.mean[i] + s * standard_normal::<T, R>(rng);
                }
            }
        }
    }

    /// `D^{-1/2} Uᵀ v` (full), `v / σᵢ` (diagonal), `v / σ` (spherical).
    pub fn whiten(&self, v: &DVector<T>) -> Result<DVector<T>, BeliefError> {
        self.check_dim(v.len())?;
        Ok(match &self.covariance {
            Covariance::Full {
                eigenvectors,
                eigenvalues,
            } => {
                let mut r = eigenvectors.tr_mul(v);
                for (ri, &l) in r.iter_mut().zip(eigenvalues.iter()) {
                    *ri /= l.sqrt();
                }
                r
            }
            Covariance::Diagonal { variances } => v.zip_map(variances, |x, s2| x / s2.sqrt()),
            Covariance::Spherical { variance } => v / variance.sqrt(),
        })
    }

    /// Inverse of [`BeliefState::whiten`]: `U D^{1/2} r`.
    pub fn unwhiten(&self, r: &DVector<T>) -> Result<DVector<T>, BeliefError> {
        self.check_dim(r.len())?;
        Ok(match &self.covariance {
            Covariance::Full {
                eigenvectors,
                eigenvalues,
            } => {
                let scaled = r.zip_map(eigenvalues, |x, l| x * l.sqrt());
                eigenvectors * scaled
            }
            Covariance::Diagonal { variances } => r.zip_map(variances, |x, s2| x * s2.sqrt()),
            Covariance::Spherical { variance } => r * variance.sqrt(),
        })
    }

    /// Clamps every eigenvalue / variance to at least `floor` and re-orthonormalizes
    /// drifted eigenvectors. Beliefs already satisfying both are returned untouched.
    pub fn correct_spectrum(mut self, floor: T) -> Self {
        self.correct_spectrum_in_place(floor);
        self
    }

    pub fn correct_spectrum_in_place(&mut self, floor: T) {
        match &mut self.covariance {
            Covariance::Full {
                eigenvectors,
                eigenvalues,
            } => {
                for l in eigenvalues.iter_mut() {
                    if *l < floor || !l.is_finite() {
                        *l = floor;
                    }
                }
                if orthonormality_drift(eigenvectors) > T::lit(ORTHONORMALITY_DRIFT) {
                    gram_schmidt(eigenvectors);
                }
            }
            Covariance::Diagonal { variances } => {
                for v in variances.iter_mut() {
                    if *v < floor || !v.is_finite() {
                        *v = floor;
                    }
                }
            }
            Covariance::Spherical { variance } => {
                if *variance < floor || !variance.is_finite() {
                    *variance = floor;
                }
            }
        }
    }

    /// Checks the representation invariants against `floor`.
    pub fn validate(&self, floor: T) -> Result<(), BeliefError> {
        if let Some(i) = self.mean.iter().position(|m| !m.is_finite()) {
            return Err(BeliefError::NonFiniteMean(i));
        }
        let below = |index: usize, v: T| {
            if v >= floor && v.is_finite() {
                Ok(())
            } else {
                Err(BeliefError::BelowFloor {
                    index,
                    value: v.as_f64(),
                    floor: floor.as_f64(),
                })
            }
        };
        match &self.covariance {
            Covariance::Full {
                eigenvectors,
                eigenvalues,
            } => {
                for (i, &l) in eigenvalues.iter().enumerate() {
                    below(i, l)?;
                }
                let drift = orthonormality_drift(eigenvectors);
                if drift > T::lit(ORTHONORMALITY_DRIFT) {
                    return Err(BeliefError::NotOrthonormal(drift.as_f64()));
                }
            }
            Covariance::Diagonal { variances } => {
                for (i, &v) in variances.iter().enumerate() {
                    below(i, v)?;
                }
            }
            Covariance::Spherical { variance } => below(0, *variance)?,
        }
        Ok(())
    }

    fn check_dim(&self, found: usize) -> Result<(), BeliefError> {
        if found == self.dim() {
            Ok(())
        } else {
            Err(BeliefError::DimensionMismatch {
                expected: self.dim(),
                found,
            })
        }
    }
}

/// `KL(posterior ‖ prior)` between two Gaussian beliefs of equal dimension:
///
/// `½(μ′−μ)ᵀΣ⁻¹(μ′−μ) + ½Tr(Σ⁻¹Σ′) − ½ log det(Σ⁻¹Σ′) − d/2`.
pub fn kl_divergence<T: Real>(
    posterior: &BeliefState<T>,
    prior: &BeliefState<T>,
) -> Result<T, BeliefError> {
    prior.check_dim(posterior.dim())?;
    let half = T::lit(0.5);
    let d = prior.dim();
    let delta = posterior.mean() - prior.mean();

    let axis_aligned = |b: &BeliefState<T>| b.variant() != Variant::Full;
    let kl = if axis_aligned(prior) && axis_aligned(posterior) {
        let var = |b: &BeliefState<T>, i: usize| match b.covariance() {
            Covariance::Diagonal { variances } => variances[i],
            Covariance::Spherical { variance } => *variance,
            Covariance::Full { .. } => unreachable!(),
        };
        let mut acc = T::zero();
        for i in 0..d {
            let s2 = var(prior, i);
            let ratio = var(posterior, i) / s2;
            acc += delta[i] * delta[i] / s2 + ratio - ratio.ln() - T::one();
        }
        half * acc
    } else {
        let white = prior.whiten(&delta)?;
        let maha = white.norm_squared();
        // tr(Σ⁻¹Σ′) as ‖W L′‖²_F with W the prior whitening and L′ a posterior factor.
        let factor = covariance_factor(posterior);
        let mut trace = T::zero();
        for j in 0..d {
            let col = DVector::from_column_slice(factor.column(j).as_slice());
            trace += prior.whiten(&col)?.norm_squared();
        }
        let log_det = posterior.log_det() - prior.log_det();
        half * (maha + trace - log_det - T::lit(d as f64))
    };
    Ok(kl.max(T::zero()))
}

/// Dense factor `L` with `L Lᵀ = Σ`.
fn covariance_factor<T: Real>(b: &BeliefState<T>) -> DMatrix<T> {
    let d = b.dim();
    match b.covariance() {
        Covariance::Full {
            eigenvectors,
            eigenvalues,
        } => scale_columns(eigenvectors, eigenvalues.iter().map(|l| l.sqrt())),
        Covariance::Diagonal { variances } => DMatrix::from_diagonal(&variances.map(|v| v.sqrt())),
        Covariance::Spherical { variance } => DMatrix::from_diagonal_element(d, d, variance.sqrt()),
    }
}

pub(crate) fn standard_normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::lit(z)
}

pub(crate) fn scale_columns<T: Real>(m: &DMatrix<T>, scales: impl Iterator<Item = T>) -> DMatrix<T> {
    let mut out = m.clone();
    for (mut col, s) in out.column_iter_mut().zip(scales) {
        col *= s;
    }
    out
}

pub(crate) fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigendecomposition of a symmetric matrix, returned as `(U, D)`.
pub(crate) fn symmetric_eigen<T: Real>(mut m: DMatrix<T>) -> (DMatrix<T>, DVector<T>) {
    symmetrize(&mut m);
    let eig = m.symmetric_eigen();
    (eig.eigenvectors, eig.eigenvalues)
}

/// `‖UᵀU − I‖_max`.
pub fn orthonormality_drift<T: Real>(u: &DMatrix<T>) -> T {
    let gram = u.tr_mul(u);
    let n = gram.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Modified Gram–Schmidt on the columns of `u`, in place.
pub fn gram_schmidt<T: Real>(u: &mut DMatrix<T>) {
    let n = u.ncols();
    for j in 0..n {
        for k in 0..j {
            let proj = u.column(k).dot(&u.column(j));
            let qk = u.column(k).clone_owned();
            u.column_mut(j).axpy(-proj, &qk, T::one());
        }
        let norm = u.column(j).norm();
        if norm > T::zero() {
            u.column_mut(j).unscale_mut(norm);
        }
    }
}
