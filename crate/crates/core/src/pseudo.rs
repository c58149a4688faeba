//! Flow updates read as Gaussian conditioning on a pseudo datapoint.
//!
//! A prior `N(μ, Σ)` and posterior `N(μ′, Σ′)` are explained by observing `x`
//! with noise covariance `R`, where `R = (Σ′⁻¹ − Σ⁻¹)⁻¹` and
//! `x = R(Σ′⁻¹μ′ − Σ⁻¹μ)`. `R` is symmetric but can be indefinite; a negative
//! eigenvalue means the update forgot information along that direction.
//! Directions where the precision did not change carry an infinite `R`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::belief::{symmetric_eigen, BeliefError, BeliefState, Covariance, Variant};
use crate::scalar::Real;

/// Relative Frobenius change of the covariance below which no datapoint is reported.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("covariance unchanged; the update carries no pseudo datapoint")]
    NoDatapoint,
    #[error("prior is {prior} but posterior is {posterior}")]
    VariantMismatch { prior: Variant, posterior: Variant },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("pseudo datapoint yields a precision that is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Eigen-structure of the pseudo-observation noise `R`.
#[derive(Debug, Clone, PartialEq)]
pub enum PseudoPrecision<T: Real> {
    /// `R = V diag(r) Vᵀ`.
    Full { basis: DMatrix<T>, eigenvalues: DVector<T> },
    Diagonal(DVector<T>),
    /// `R = λ I`.
    Scalar(T),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDatapoint<T: Real> {
    pub round: u64,
    pub x: DVector<T>,
    pub r: PseudoPrecision<T>,
}

impl<T: Real> PseudoDatapoint<T> {
    /// Eigenvalues of `R` (may be infinite or negative).
    pub fn r_eigenvalues(&self) -> DVector<T> {
        match &self.r {
            PseudoPrecision::Full { eigenvalues, .. } => eigenvalues.clone(),
            PseudoPrecision::Diagonal(r) => r.clone(),
            PseudoPrecision::Scalar(l) => DVector::from_element(1, *l),
        }
    }

    /// Spherical precision `ρ = 1/λ`.
    pub fn rho(&self) -> Option<T> {
        match self.r {
            PseudoPrecision::Scalar(l) => Some(T::one() / l),
            _ => None,
        }
    }

    /// Dense `R`; entries are infinite along unchanged directions.
    pub fn r_matrix(&self, dim: usize) -> DMatrix<T> {
        match &self.r {
            PseudoPrecision::Full { basis, eigenvalues } => {
                basis * DMatrix::from_diagonal(eigenvalues) * basis.transpose()
            }
            PseudoPrecision::Diagonal(r) => DMatrix::from_diagonal(r),
            PseudoPrecision::Scalar(l) => DMatrix::identity(dim, dim) * *l,
        }
    }

    pub fn is_positive_semidefinite(&self) -> bool {
        self.r_eigenvalues().iter().all(|&r| r >= T::zero())
    }
}

fn relative_change<T: Real>(prior: &BeliefState<T>, posterior: &BeliefState<T>) -> T {
    match (prior.covariance(), posterior.covariance()) {
        (Covariance::Diagonal { variances: a }, Covariance::Diagonal { variances: b }) => (b - a).norm() / a.norm(),
        (Covariance::Spherical { variance: a }, Covariance::Spherical { variance: b }) => (*b - *a).abs() / a.abs(),
        _ => {
            let a = prior.covariance_matrix();
            (posterior.covariance_matrix() - &a).norm() / a.norm()
        }
    }
}

/// Precision changes smaller than this (relative to the larger precision) are treated as zero.
fn null_threshold<T: Real>(scale: T) -> T {
    scale * T::lit(1e-13)
}

/// The pseudo datapoint explaining `prior → posterior`.
pub fn extract_pseudo<T: Real>(
    prior: &BeliefState<T>,
    posterior: &BeliefState<T>,
) -> Result<PseudoDatapoint<T>, PseudoError> {
    if prior.variant() != posterior.variant() {
        return Err(PseudoError::VariantMismatch {
            prior: prior.variant(),
            posterior: posterior.variant(),
        });
    }
    if prior.dim() != posterior.dim() {
        return Err(PseudoError::DimensionMismatch {
            expected: prior.dim(),
            found: posterior.dim(),
        });
    }
    if relative_change(prior, posterior) <= T::lit(IDENTITY_TOLERANCE) {
        return Err(PseudoError::NoDatapoint);
    }
    let (mu, mu_new) = (prior.mean(), posterior.mean());
    match (prior.covariance(), posterior.covariance()) {
        (Covariance::Diagonal { variances: s }, Covariance::Diagonal { variances: s_new }) => {
            let d = prior.dim();
            let mut x = DVector::zeros(d);
            let mut r = DVector::zeros(d);
            for i in 0..d {
                let (p, p_new) = (T::one() / s[i], T::one() / s_new[i]);
                let k = p_new - p;
                if k.abs() <= null_threshold(p.max(p_new)) {
                    r[i] = T::max_value().unwrap();
                    x[i] = mu_new[i];
                } else {
                    r[i] = T::one() / k;
                    x[i] = r[i] * (p_new * mu_new[i] - p * mu[i]);
                }
            }
            Ok(PseudoDatapoint {
                round: 0,
                x,
                r: PseudoPrecision::Diagonal(r.map(infinite_if_max)),
            })
        }
        (Covariance::Spherical { variance: s }, Covariance::Spherical { variance: s_new }) => {
            let (p, p_new) = (T::one() / *s, T::one() / *s_new);
            let lambda = T::one() / (p_new - p);
            let x = (mu_new * p_new - mu * p) * lambda;
            Ok(PseudoDatapoint {
                round: 0,
                x,
                r: PseudoPrecision::Scalar(lambda),
            })
        }
        _ => {
            let p = prior.precision_matrix();
            let p_new = posterior.precision_matrix();
            let q = &p_new * mu_new - &p * mu;
            let (basis, kappa) = symmetric_eigen(&p_new - &p);
            let scale = p.amax().max(p_new.amax());
            let coords = basis.tr_mul(&q);
            let mean_coords = basis.tr_mul(mu_new);
            let mut r = DVector::zeros(kappa.len());
            let mut xc = DVector::zeros(kappa.len());
            for i in 0..kappa.len() {
                if kappa[i].abs() <= null_threshold(scale) {
                    r[i] = T::max_value().unwrap();
                    xc[i] = mean_coords[i];
                } else {
                    r[i] = T::one() / kappa[i];
                    xc[i] = coords[i] * r[i];
                }
            }
            let x = &basis * xc;
            Ok(PseudoDatapoint {
                round: 0,
                x,
                r: PseudoPrecision::Full {
                    basis,
                    eigenvalues: r.map(infinite_if_max),
                },
            })
        }
    }
}

fn infinite_if_max<T: Real>(v: T) -> T {
    if v == T::max_value().unwrap() {
        T::one() / T::zero()
    } else {
        v
    }
}

/// `1/r`, with `1/∞ = 0`.
fn recip<T: Real>(r: T) -> T {
    if r.is_finite() {
        T::one() / r
    } else {
        T::zero()
    }
}

/// Conjugate update of `prior` on observing `x` with noise covariance `R`.
pub fn bayes_update_gaussian<T: Real>(
    prior: &BeliefState<T>,
    point: &PseudoDatapoint<T>,
) -> Result<BeliefState<T>, PseudoError> {
    let d = prior.dim();
    if point.x.len() != d {
        return Err(PseudoError::DimensionMismatch {
            expected: d,
            found: point.x.len(),
        });
    }
    let mu = prior.mean();
    match (&point.r, prior.covariance()) {
        (PseudoPrecision::Diagonal(r), Covariance::Diagonal { variances }) => {
            let mut mean = DVector::zeros(d);
            let mut var = DVector::zeros(d);
            for i in 0..d {
                let (p, k) = (T::one() / variances[i], recip(r[i]));
                let prec = p + k;
                if !(prec > T::zero()) {
                    return Err(PseudoError::NotPositiveDefinite);
                }
                var[i] = T::one() / prec;
                mean[i] = var[i] * (p * mu[i] + k * point.x[i]);
            }
            Ok(BeliefState::diagonal(mean, var)?)
        }
        (PseudoPrecision::Scalar(l), Covariance::Spherical { variance }) => {
            let (p, k) = (T::one() / *variance, recip(*l));
            let prec = p + k;
            if !(prec > T::zero()) {
                return Err(PseudoError::NotPositiveDefinite);
            }
            let var = T::one() / prec;
            Ok(BeliefState::spherical((mu * p + &point.x * k) * var, var)?)
        }
        (PseudoPrecision::Full { basis, eigenvalues }, _) => {
            let p = prior.precision_matrix();
            let k_eigs = eigenvalues.map(recip);
            let k = basis * DMatrix::from_diagonal(&k_eigs) * basis.transpose();
            let (u, prec_eigs) = symmetric_eigen(&p + &k);
            if prec_eigs.iter().any(|&l| !(l > T::zero())) {
                return Err(PseudoError::NotPositiveDefinite);
            }
            let cov_eigs = prec_eigs.map(|l| T::one() / l);
            let rhs = &p * mu + &k * &point.x;
            let mean = &u * DMatrix::from_diagonal(&cov_eigs) * u.tr_mul(&rhs);
            Ok(BeliefState::full(mean, u, cov_eigs)?)
        }
        (PseudoPrecision::Diagonal(r), _) => {
            // A diagonal R against a non-diagonal prior: treat as an axis-aligned basis.
            let point = PseudoDatapoint {
                round: point.round,
                x: point.x.clone(),
                r: PseudoPrecision::Full {
                    basis: DMatrix::identity(d, d),
                    eigenvalues: r.clone(),
                },
            };
            bayes_update_gaussian(prior, &point)
        }
        (PseudoPrecision::Scalar(l), _) => {
            let point = PseudoDatapoint {
                round: point.round,
                x: point.x.clone(),
                r: PseudoPrecision::Full {
                    basis: DMatrix::identity(d, d),
                    eigenvalues: DVector::from_element(d, *l),
                },
            };
            bayes_update_gaussian(prior, &point)
        }
    }
}

/// One row of a pseudo-dataset trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry<T: Real> {
    pub round: u64,
    /// `None` for identity rounds.
    pub datapoint: Option<PseudoDatapoint<T>>,
    pub variant: Variant,
    /// Running `Σρ` over spherical datapoints so far.
    pub cum_rho: Option<T>,
}

/// Pseudo datapoints between consecutive snapshots `(round, belief)`.
pub fn pseudo_trace<T: Real>(snapshots: &[(u64, BeliefState<T>)]) -> Result<Vec<TraceEntry<T>>, PseudoError> {
    let mut out = Vec::with_capacity(snapshots.len().saturating_sub(1));
    let mut cum = T::zero();
    for pair in snapshots.windows(2) {
        let ((_, prior), (round, posterior)) = (&pair[0], &pair[1]);
        let variant = posterior.variant();
        let datapoint = match extract_pseudo(prior, posterior) {
            Ok(mut p) => {
                p.round = *round;
                Some(p)
            }
            Err(PseudoError::NoDatapoint) => None,
            Err(e) => return Err(e),
        };
        if let Some(rho) = datapoint.as_ref().and_then(PseudoDatapoint::rho) {
            cum += rho;
        }
        out.push(TraceEntry {
            round: *round,
            datapoint,
            variant,
            cum_rho: (variant == Variant::Spherical).then_some(cum),
        });
    }
    Ok(out)
}

fn join<T: Real>(v: &DVector<T>) -> String {
    v.iter().map(|x| format!("{}", x.as_f64())).collect::<Vec<_>>().join(" ")
}

/// Writes `round,kind,x,r_eigenvalues,rho,cum_rho`; vectors are space-separated and
/// the full variant reports eigenvalues only.
pub fn write_trace_csv<T: Real, W: Write>(entries: &[TraceEntry<T>], out: W) -> Result<(), PseudoError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| PseudoError::Io(e.into());
    w.write_record(["round", "kind", "x", "r_eigenvalues", "rho", "cum_rho"]).map_err(io)?;
    for e in entries {
        let cum = e.cum_rho.map(|c| format!("{}", c.as_f64())).unwrap_or_default();
        let row = match &e.datapoint {
            None => [e.round.to_string(), "none".into(), String::new(), String::new(), String::new(), cum],
            Some(p) => {
                let x = if e.variant == Variant::Full { String::new() } else { join(&p.x) };
                let rho = p.rho().map(|r| format!("{}", r.as_f64())).unwrap_or_default();
                [e.round.to_string(), "datapoint".into(), x, join(&p.r_eigenvalues()), rho, cum]
            }
        };
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
