//! KL-minimal linear flows `w ↦ A w + b`.
//!
//! Given a belief `N(μ, Σ)`, a sampled weight `w` and its gradient-step image
//! `w′`, the flow picks the `(A, b)` with `A w + b = w′` whose pushforward of
//! the belief is closest in KL divergence to the belief itself. The full
//! variant works in whitened coordinates, where the optimal map is the identity
//! outside the plane spanned by the whitened displacements and a closed-form
//! 2×2 matrix inside it. Diagonal and spherical flows reduce to the scalar
//! version of the same formula.
//!
//! `b` is never stored: it is implied by `b = w′ − A w`, and the posterior mean
//! is `A(μ − w) + w′`.

use nalgebra::{DMatrix, DVector, Matrix2};
use thiserror::Error;

use crate::belief::{BeliefError, BeliefState, Covariance, Variant};
use crate::scalar::Real;

/// Default degeneracy tolerance on whitened norms.
pub const DEFAULT_EPS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("target displacement has norm {norm:e}, below the degeneracy tolerance")]
    DegenerateTarget { norm: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{solver} flow needs a {solver} belief, got {found}")]
    VariantMismatch { solver: Variant, found: Variant },
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

/// Root selector `δ ∈ {−1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value<T: Real>(self) -> T {
        match self {
            Sign::Plus => T::one(),
            Sign::Minus => -T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig<T> {
    /// `(δ₁, δ₂)`; `(+, +)` selects the solution connected to the identity.
    pub branches: (Sign, Sign),
    /// Clamp singular values of the flow to at most one after solving.
    pub non_expansive: bool,
    /// Degeneracy tolerance on whitened norms; must be positive.
    pub eps: T,
}

impl<T: Real> Default for FlowConfig<T> {
    fn default() -> Self {
        Self {
            branches: (Sign::Plus, Sign::Plus),
            non_expansive: false,
            eps: T::lit(DEFAULT_EPS),
        }
    }
}

impl<T: Real> FlowConfig<T> {
    pub fn non_expansive(mut self, on: bool) -> Self {
        self.non_expansive = on;
        self
    }
}

/// Optimal scale of a one-dimensional flow, `(uv + δ√(4 + u²(4 + v²))) / (2(1 + u²))`,
/// where `u` and `v` are the standardized positions before and after the step.
/// Returns exactly one when `u == v`.
pub fn axis_scale<T: Real>(u: T, v: T, delta: Sign) -> T {
    if u == v && delta == Sign::Plus {
        return T::one();
    }
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let root = (four + u * u * (four + v * v)).sqrt();
    (u * v + delta.value::<T>() * root) / (two * (T::one() + u * u))
}

/// Closed-form 2×2 block of the full flow in the whitened basis `(μ̂, ν̂)`, with the
/// whitened sample at `u μ̂` and its image at `v∥ μ̂ + v⊥ ν̂`.
pub fn solve_2x2<T: Real>(
    u: T,
    v_par: T,
    v_perp: T,
    d1: Sign,
    d2: Sign,
    eps: T,
) -> Result<Matrix2<T>, FlowError> {
    let norm = (v_par * v_par + v_perp * v_perp).sqrt();
    if !(norm > eps) {
        return Err(FlowError::DegenerateTarget { norm: norm.as_f64() });
    }
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let alpha = (u * norm + d1.value::<T>() * (four + u * u * (four + norm * norm)).sqrt())
        / (two * (T::one() + u * u));
    let s2 = d2.value::<T>();
    Ok(Matrix2::new(
        alpha * v_par / norm,
        -s2 * v_perp / norm,
        alpha * v_perp / norm,
        s2 * v_par / norm,
    ))
}

/// Max-abs residual of `A diag(1+u², 1) Aᵀ − [v∥u 0; v⊥u 0] Aᵀ − I`, the stationarity
/// condition of the whitened KL objective restricted to the 2-D subspace.
pub fn optimality_residual<T: Real>(a2: &Matrix2<T>, u: T, v_par: T, v_perp: T) -> T {
    let weight = Matrix2::new(T::one() + u * u, T::zero(), T::zero(), T::one());
    let target = Matrix2::new(v_par * u, T::zero(), v_perp * u, T::zero());
    let r = a2 * weight * a2.transpose() - target * a2.transpose() - Matrix2::identity();
    r.amax()
}

/// Which closed-form branch produced a full flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FullBranch {
    /// Generic case: rotation-and-scale inside the plane `(μ̂, ν̂)`.
    Plane,
    /// Colinear or vanishing target: one-dimensional scale along `μ̂`.
    Axis,
    /// Sample at the mean: `A = I`, pure translation.
    Translation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullFlow<T: Real> {
    pub branch: FullBranch,
    /// Unit whitened direction of `w − μ` (zero for [`FullBranch::Translation`]).
    pub mu_hat: DVector<T>,
    /// Unit whitened direction orthogonal to `μ̂` (zero unless [`FullBranch::Plane`]).
    pub nu_hat: DVector<T>,
    pub u: T,
    pub v_par: T,
    pub v_perp: T,
    pub a2: Matrix2<T>,
    // U √D [μ̂ ν̂] and U D^{-1/2} [μ̂ ν̂]; A = I + lift (A₂ − I) pullᵀ.
    lift: DMatrix<T>,
    pull: DMatrix<T>,
}

impl<T: Real> FullFlow<T> {
    fn translation(d: usize) -> Self {
        Self {
            branch: FullBranch::Translation,
            mu_hat: DVector::zeros(d),
            nu_hat: DVector::zeros(d),
            u: T::zero(),
            v_par: T::zero(),
            v_perp: T::zero(),
            a2: Matrix2::identity(),
            lift: DMatrix::zeros(d, 2),
            pull: DMatrix::zeros(d, 2),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.a2 == Matrix2::identity()
    }

    /// `A x`.
    pub fn transform(&self, x: &DVector<T>) -> DVector<T> {
        if self.is_identity() {
            return x.clone();
        }
        let m = self.a2 - Matrix2::identity();
        let coords = self.pull.tr_mul(x);
        let mut out = x.clone();
        out.gemv(T::one(), &self.lift, &(m * nalgebra::Vector2::new(coords[0], coords[1])), T::one());
        out
    }

    /// Dense `A = I + U√D [μ̂ ν̂](A₂ − I)[μ̂ ν̂]ᵀ D^{-1/2}Uᵀ`.
    pub fn matrix(&self) -> DMatrix<T> {
        let d = self.mu_hat.len();
        let m = self.a2 - Matrix2::identity();
        let m = DMatrix::from_fn(2, 2, |i, j| m[(i, j)]);
        DMatrix::identity(d, d) + &self.lift * m * self.pull.transpose()
    }

    /// `I + [μ̂ ν̂](A₂ − I)[μ̂ ν̂]ᵀ`, the flow in the prior's whitened coordinates.
    pub fn whitened_matrix(&self) -> DMatrix<T> {
        let d = self.mu_hat.len();
        let basis = DMatrix::from_columns(&[self.mu_hat.clone(), self.nu_hat.clone()]);
        let m = self.a2 - Matrix2::identity();
        let m = DMatrix::from_fn(2, 2, |i, j| m[(i, j)]);
        DMatrix::identity(d, d) + &basis * m * basis.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalFlow<T: Real> {
    pub scales: DVector<T>,
}

/// Rotation in the plane of two unit vectors taking `from` to `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneRotation<T: Real> {
    pub from: DVector<T>,
    pub to: DVector<T>,
}

impl<T: Real> PlaneRotation<T> {
    pub fn apply(&self, x: &DVector<T>) -> DVector<T> {
        let c = self.from.dot(&self.to);
        let two = T::lit(2.0);
        if c > T::lit(-1.0 + 1e-12) {
            // R = I − (a+b)(a+b)ᵀ/(1+c) + 2 b aᵀ
            let s = &self.from + &self.to;
            let mut out = x - &s * (s.dot(x) / (T::one() + c));
            out.axpy(two * self.from.dot(x), &self.to, T::one());
            out
        } else if x.len() == 1 {
            -x
        } else {
            // Antipodal: half-turn in the plane of `from` and any orthogonal axis.
            let axis = orthogonal_unit(&self.from);
            let mut out = x.clone();
            out.axpy(-two * self.from.dot(x), &self.from, T::one());
            out.axpy(-two * axis.dot(x), &axis, T::one());
            out
        }
    }
}

fn orthogonal_unit<T: Real>(a: &DVector<T>) -> DVector<T> {
    let k = a.iamin();
    let mut e = DVector::zeros(a.len());
    e[k] = T::one();
    e.axpy(-a[k], a, T::one());
    let n = e.norm();
    e / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphericalFlow<T: Real> {
    /// Isotropic scale `a`.
    pub scale: T,
    /// Unit direction of `w′ − μ` (or of `w − μ` when the target sits on the mean).
    pub target: DVector<T>,
    /// `‖w − μ‖`.
    pub radius: T,
    /// Rotation aligning `w − μ` with the target direction; `None` when `w = μ`.
    pub rotation: Option<PlaneRotation<T>>,
}

/// Optimal linear flow for one update, in a variant-specific compact form.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowSolution<T: Real> {
    Full(FullFlow<T>),
    Diagonal(DiagonalFlow<T>),
    Spherical(SphericalFlow<T>),
}

impl<T: Real> FlowSolution<T> {
    pub fn variant(&self) -> Variant {
        match self {
            FlowSolution::Full(_) => Variant::Full,
            FlowSolution::Diagonal(_) => Variant::Diagonal,
            FlowSolution::Spherical(_) => Variant::Spherical,
        }
    }

    /// `A x`.
    pub fn transform(&self, x: &DVector<T>) -> DVector<T> {
        match self {
            FlowSolution::Full(f) => f.transform(x),
            FlowSolution::Diagonal(f) => x.component_mul(&f.scales),
            FlowSolution::Spherical(f) => {
                let r = match &f.rotation {
                    Some(rot) => rot.apply(x),
                    None => x.clone(),
                };
                r * f.scale
            }
        }
    }

    /// Dense `A`.
    pub fn matrix(&self, dim: usize) -> DMatrix<T> {
        match self {
            FlowSolution::Full(f) => f.matrix(),
            FlowSolution::Diagonal(f) => DMatrix::from_diagonal(&f.scales),
            FlowSolution::Spherical(_) => {
                let cols: Vec<DVector<T>> = (0..dim)
                    .map(|j| self.transform(&DVector::from_fn(dim, |i, _| if i == j { T::one() } else { T::zero() })))
                    .collect();
                DMatrix::from_columns(&cols)
            }
        }
    }

    /// Implied offset `b = w′ − A w`.
    pub fn offset(&self, w: &DVector<T>, w_new: &DVector<T>) -> DVector<T> {
        w_new - self.transform(w)
    }

    /// Largest singular value of the flow measured in the prior's whitened metric.
    pub fn max_stretch(&self) -> T {
        match self {
            FlowSolution::Full(f) => f.a2.singular_values().max(),
            FlowSolution::Diagonal(f) => f.scales.max(),
            FlowSolution::Spherical(f) => f.scale,
        }
    }
}

/// Solves the flow matching the belief's representation.
pub fn solve<T: Real>(
    belief: &BeliefState<T>,
    w: &DVector<T>,
    w_new: &DVector<T>,
    cfg: &FlowConfig<T>,
) -> Result<FlowSolution<T>, FlowError> {
    match belief.variant() {
        Variant::Full => solve_full(belief, w, w_new, cfg),
        Variant::Diagonal => solve_diagonal(belief, w, w_new, cfg),
        Variant::Spherical => solve_spherical(belief, w, w_new, cfg),
    }
}

fn check_dims<T: Real>(belief: &BeliefState<T>, w: &DVector<T>, w_new: &DVector<T>) -> Result<(), FlowError> {
    for found in [w.len(), w_new.len()] {
        if found != belief.dim() {
            return Err(FlowError::DimensionMismatch {
                expected: belief.dim(),
                found,
            });
        }
    }
    Ok(())
}

pub fn solve_full<T: Real>(
    belief: &BeliefState<T>,
    w: &DVector<T>,
    w_new: &DVector<T>,
    cfg: &FlowConfig<T>,
) -> Result<FlowSolution<T>, FlowError> {
    check_dims(belief, w, w_new)?;
    let Covariance::Full {
        eigenvectors,
        eigenvalues,
    } = belief.covariance()
    else {
        return Err(FlowError::VariantMismatch {
            solver: Variant::Full,
            found: belief.variant(),
        });
    };
    let d = belief.dim();
    if w == w_new {
        return Ok(FlowSolution::Full(FullFlow::translation(d)));
    }
    let delta = belief.whiten(&(w - belief.mean()))?;
    let delta_new = belief.whiten(&(w_new - belief.mean()))?;
    let u = delta.norm();
    if u <= cfg.eps {
        return Ok(FlowSolution::Full(FullFlow::translation(d)));
    }
    let mu_hat = &delta / u;
    let v_par = delta_new.dot(&mu_hat);
    let rest = &delta_new - &mu_hat * v_par;
    let v_perp = rest.norm();
    let target_norm = delta_new.norm();
    let (d1, d2) = cfg.branches;

    let (branch, nu_hat, a2) = if target_norm <= cfg.eps {
        let a = axis_scale(u, T::zero(), d1);
        (FullBranch::Axis, DVector::zeros(d), Matrix2::new(a, T::zero(), T::zero(), T::one()))
    } else if v_perp <= cfg.eps {
        let a = axis_scale(u, v_par, d1);
        (FullBranch::Axis, DVector::zeros(d), Matrix2::new(a, T::zero(), T::zero(), T::one()))
    } else {
        let a2 = solve_2x2(u, v_par, v_perp, d1, d2, cfg.eps)?;
        (FullBranch::Plane, &rest / v_perp, a2)
    };

    let embed = |scale: &dyn Fn(T) -> T| {
        let cols: Vec<DVector<T>> = [&mu_hat, &nu_hat]
            .iter()
            .map(|c| {
                let scaled = DVector::from_fn(d, |i, _| c[i] * scale(eigenvalues[i]));
                eigenvectors * scaled
            })
            .collect();
        DMatrix::from_columns(&cols)
    };
    let lift = embed(&|l: T| l.sqrt());
    let pull = embed(&|l: T| T::one() / l.sqrt());
    Ok(FlowSolution::Full(FullFlow {
        branch,
        mu_hat,
        nu_hat,
        u,
        v_par,
        v_perp,
        a2,
        lift,
        pull,
    }))
}

pub fn solve_diagonal<T: Real>(
    belief: &BeliefState<T>,
    w: &DVector<T>,
    w_new: &DVector<T>,
    cfg: &FlowConfig<T>,
) -> Result<FlowSolution<T>, FlowError> {
    check_dims(belief, w, w_new)?;
    let Covariance::Diagonal { variances } = belief.covariance() else {
        return Err(FlowError::VariantMismatch {
            solver: Variant::Diagonal,
            found: belief.variant(),
        });
    };
    let mean = belief.mean();
    let scales = DVector::from_fn(belief.dim(), |i, _| {
        coordinate_scale(mean[i], variances[i], w[i], w_new[i], cfg.branches.0)
    });
    Ok(FlowSolution::Diagonal(DiagonalFlow { scales }))
}

#[inline]
pub(crate) fn coordinate_scale<T: Real>(mean: T, variance: T, w: T, w_new: T, delta: Sign) -> T {
    if w == w_new && delta == Sign::Plus {
        return T::one();
    }
    let sd = variance.sqrt();
    axis_scale((w - mean) / sd, (w_new - mean) / sd, delta)
}

pub fn solve_spherical<T: Real>(
    belief: &BeliefState<T>,
    w: &DVector<T>,
    w_new: &DVector<T>,
    cfg: &FlowConfig<T>,
) -> Result<FlowSolution<T>, FlowError> {
    check_dims(belief, w, w_new)?;
    let Covariance::Spherical { variance } = belief.covariance() else {
        return Err(FlowError::VariantMismatch {
            solver: Variant::Spherical,
            found: belief.variant(),
        });
    };
    let sd = variance.sqrt();
    let delta = w - belief.mean();
    let delta_new = w_new - belief.mean();
    let radius = delta.norm();
    let radius_new = delta_new.norm();
    let d = belief.dim();

    if radius <= cfg.eps * sd {
        let target = if radius_new > T::zero() {
            &delta_new / radius_new
        } else {
            DVector::zeros(d)
        };
        return Ok(FlowSolution::Spherical(SphericalFlow {
            scale: T::one(),
            target,
            radius: T::zero(),
            rotation: None,
        }));
    }
    let from = &delta / radius;
    let (target, v) = if radius_new <= cfg.eps * sd {
        (from.clone(), T::zero())
    } else {
        (&delta_new / radius_new, radius_new / sd)
    };
    let scale = if w == w_new {
        T::one()
    } else {
        axis_scale(radius / sd, v, cfg.branches.0)
    };
    Ok(FlowSolution::Spherical(SphericalFlow {
        scale,
        rotation: Some(PlaneRotation {
            from,
            to: target.clone(),
        }),
        target,
        radius,
    }))
}

/// Projects a flow onto the non-expansive set by clamping its singular values
/// (measured in the whitened metric) to at most one.
pub fn clamp_nonexpansive<T: Real>(flow: FlowSolution<T>) -> FlowSolution<T> {
    match flow {
        FlowSolution::Full(mut f) => {
            let svd = f.a2.svd(true, true);
            if svd.singular_values.iter().all(|&s| s <= T::one()) {
                return FlowSolution::Full(f);
            }
            let clamped = svd.singular_values.map(|s| s.min(T::one()));
            let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
                unreachable!("svd requested with both factors")
            };
            f.a2 = u * Matrix2::from_diagonal(&clamped) * v_t;
            FlowSolution::Full(f)
        }
        FlowSolution::Diagonal(mut f) => {
            for a in f.scales.iter_mut() {
                if *a > T::one() {
                    *a = T::one();
                }
            }
            FlowSolution::Diagonal(f)
        }
        FlowSolution::Spherical(mut f) => {
            f.scale = f.scale.min(T::one());
            FlowSolution::Spherical(f)
        }
    }
}

/// Posterior `N(A(μ − w) + w′, A Σ Aᵀ)` of a solved flow.
pub fn apply_flow<T: Real>(
    belief: &BeliefState<T>,
    flow: &FlowSolution<T>,
    w: &DVector<T>,
    w_new: &DVector<T>,
) -> Result<BeliefState<T>, FlowError> {
    check_dims(belief, w, w_new)?;
    if flow.variant() != belief.variant() {
        return Err(FlowError::VariantMismatch {
            solver: flow.variant(),
            found: belief.variant(),
        });
    }
    if w == w_new {
        return Ok(belief.clone());
    }
    let step = w_new - w;
    let mean = belief.mean();
    match (flow, belief.covariance()) {
        (FlowSolution::Full(f), Covariance::Full { .. }) => {
            if f.is_identity() {
                return Ok(BeliefState::new(mean + step, belief.covariance().clone())?);
            }
            let m = f.a2 - Matrix2::identity();
            // A(μ − w) = (μ − w) − u lift (A₂ − I) e₁
            let shift = &f.lift * nalgebra::Vector2::new(m[(0, 0)], m[(1, 0)]) * f.u;
            let new_mean = mean + step - shift;
            // A Σ Aᵀ = Σ + lift (A₂A₂ᵀ − I) liftᵀ
            let q = f.a2 * f.a2.transpose() - Matrix2::identity();
            let q = DMatrix::from_fn(2, 2, |i, j| q[(i, j)]);
            let cov = belief.covariance_matrix() + &f.lift * q * f.lift.transpose();
            let (u, mut d) = crate::belief::symmetric_eigen(cov);
            // Round-off can push a tiny eigenvalue of a positive-definite product to ≤ 0.
            let tiny = d.max() * T::default_epsilon();
            d.apply(|l| *l = l.max(tiny));
            Ok(BeliefState::full(new_mean, u, d)?)
        }
        (FlowSolution::Diagonal(f), Covariance::Diagonal { variances }) => {
            let mut new_mean = mean.clone();
            let mut new_var = variances.clone();
            for i in 0..belief.dim() {
                if w[i] == w_new[i] && f.scales[i] == T::one() {
                    continue;
                }
                let a = f.scales[i];
                new_mean[i] = mean[i] + step[i] + (a - T::one()) * (mean[i] - w[i]);
                new_var[i] = a * a * variances[i];
            }
            Ok(BeliefState::diagonal(new_mean, new_var)?)
        }
        (FlowSolution::Spherical(f), Covariance::Spherical { variance }) => {
            let new_mean = if f.rotation.is_none() {
                mean + step
            } else {
                w_new - &f.target * (f.scale * f.radius)
            };
            Ok(BeliefState::spherical(new_mean, f.scale * f.scale * *variance)?)
        }
        _ => unreachable!("variants checked above"),
    }
}

/// Solve, optionally clamp, and apply in one call.
pub fn update<T: Real>(
    belief: &BeliefState<T>,
    w: &DVector<T>,
    w_new: &DVector<T>,
    cfg: &FlowConfig<T>,
) -> Result<(BeliefState<T>, FlowSolution<T>), FlowError> {
    let mut flow = solve(belief, w, w_new, cfg)?;
    if cfg.non_expansive {
        flow = clamp_nonexpansive(flow);
    }
    let posterior = apply_flow(belief, &flow, w, w_new)?;
    Ok((posterior, flow))
}
