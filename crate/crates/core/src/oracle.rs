//! Numerical reference for the flow solvers.
//!
//! Minimizes `KL(N(A(μ − w) + w′, AΣAᵀ) ‖ N(μ, Σ))` directly over dense `A` with
//! `det A > 0`, in the original (unwhitened) coordinates, using BFGS with a
//! backtracking line search. Nothing here reuses the closed-form machinery.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Extra randomly perturbed starting points besides the identity.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            grad_tol: 1e-12,
            restarts: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub matrix: DMatrix<f64>,
    pub kl: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// KL objective of a linear flow and its gradient with respect to `A`.
pub struct FlowObjective {
    precision: DMatrix<f64>,
    cov: DMatrix<f64>,
    delta: DVector<f64>,
    delta_new: DVector<f64>,
    dim: usize,
}

impl FlowObjective {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>, w: &DVector<f64>, w_new: &DVector<f64>) -> Option<Self> {
        let chol = Cholesky::<f64, Dyn>::new(cov.clone())?;
        Some(Self {
            precision: chol.inverse(),
            cov: cov.clone(),
            delta: w - mean,
            delta_new: w_new - mean,
            dim: mean.len(),
        })
    }

    /// `½ rᵀΣ⁻¹r + ½ tr(Σ⁻¹AΣAᵀ) − ln det A − d/2` with `r = Δ′ − AΔ`; `None` if `det A ≤ 0`.
    pub fn value(&self, a: &DMatrix<f64>) -> Option<f64> {
        let det = a.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        let r = &self.delta_new - a * &self.delta;
        let quad = r.dot(&(&self.precision * &r));
        let tr = (&self.precision * a * &self.cov * a.transpose()).trace();
        Some(0.5 * quad + 0.5 * tr - det.ln() - 0.5 * self.dim as f64)
    }

    /// `Σ⁻¹(AΣ − rΔᵀ) − A⁻ᵀ`.
    pub fn gradient(&self, a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let inv = a.clone().try_inverse()?;
        let r = &self.delta_new - a * &self.delta;
        Some(&self.precision * (a * &self.cov - &r * self.delta.transpose()) - inv.transpose())
    }
}

fn bfgs(obj: &FlowObjective, start: DMatrix<f64>, opts: &OracleOptions) -> Option<OracleSolution> {
    let d = obj.dim;
    let n = d * d;
    let mut x = DVector::from_column_slice(start.as_slice());
    let as_mat = |v: &DVector<f64>| DMatrix::from_column_slice(d, d, v.as_slice());
    let mut f = obj.value(&start)?;
    let mut g = DVector::from_column_slice(obj.gradient(&start)?.as_slice());
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it;
        if g.amax() < opts.grad_tol {
            break;
        }
        let mut p = -(&h * &g);
        if p.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            p = -g.clone();
        }
        let slope = p.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let cand = &x + &p * step;
            if let Some(fc) = obj.value(&as_mat(&cand)) {
                if fc <= f + 1e-4 * step * slope {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else { break };
        let g_new = DVector::from_column_slice(obj.gradient(&as_mat(&x_new))?.as_slice());
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let stalled = (f - f_new).abs() <= 1e-16 * f.abs().max(1.0) && s.amax() < 1e-15;
        x = x_new;
        f = f_new;
        g = g_new;
        if stalled {
            break;
        }
    }
    Some(OracleSolution {
        matrix: as_mat(&x),
        kl: f,
        grad_norm: g.norm(),
        iterations,
    })
}

/// Best orientation-preserving linear flow found from several starts.
pub fn minimize_flow_kl(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    w: &DVector<f64>,
    w_new: &DVector<f64>,
    opts: &OracleOptions,
) -> Option<OracleSolution> {
    let obj = FlowObjective::new(mean, cov, w, w_new)?;
    let d = mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<OracleSolution> = None;
    for k in 0..=opts.restarts {
        let mut start = DMatrix::<f64>::identity(d, d);
        if k > 0 {
            for v in start.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
            if start.determinant() <= 0.0 {
                continue;
            }
        }
        if let Some(sol) = bfgs(&obj, start, opts) {
            if best.as_ref().is_none_or(|b| sol.kl < b.kl) {
                best = Some(sol);
            }
        }
    }
    best
}

/// Per-coordinate minimizer of `½(v − au)² + ½a² − ln a` over `a > 0` by bisection
/// on its strictly increasing derivative.
pub fn minimize_axis_kl(u: f64, v: f64) -> f64 {
    let deriv = |a: f64| -u * (v - a * u) + a - 1.0 / a;
    let (mut lo, mut hi) = (1e-300_f64.sqrt(), 1.0);
    while deriv(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if deriv(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Value of the one-dimensional objective at `a`.
pub fn axis_kl(u: f64, v: f64, a: f64) -> f64 {
    0.5 * (v - a * u).powi(2) + 0.5 * a * a - a.ln() - 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_recovers_identity_when_target_equals_sample() {
        let mean = DVector::from_vec(vec![0.0, 0.0]);
        let cov = DMatrix::identity(2, 2);
        let w = DVector::from_vec(vec![0.4, -0.2]);
        let sol = minimize_flow_kl(&mean, &cov, &w, &w, &OracleOptions::default()).unwrap();
        assert!(sol.kl.abs() < 1e-12);
        assert!((sol.matrix - DMatrix::<f64>::identity(2, 2)).amax() < 1e-6);
    }

    #[test]
    fn oracle_reference_two_dimensional_case() {
        let mean = DVector::zeros(2);
        let cov = DMatrix::identity(2, 2);
        let w = DVector::from_vec(vec![1.0, 0.0]);
        let w_new = DVector::from_vec(vec![1.0, 1.0]);
        let sol = minimize_flow_kl(&mean, &cov, &w, &w_new, &OracleOptions::default()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.809017, -0.707107, 0.809017, 0.707107]);
        assert!((sol.matrix - expected).amax() < 1e-5);
    }

    #[test]
    fn axis_oracle_matches_known_values() {
        assert!((minimize_axis_kl(1.0, 2.0) - 1.366_025_403_784_438_6).abs() < 1e-12);
        assert!((minimize_axis_kl(1.0, 0.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((minimize_axis_kl(0.0, 3.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mean = DVector::from_vec(vec![0.1, -0.3]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.6]);
        let obj = FlowObjective::new(&mean, &cov, &DVector::from_vec(vec![0.5, 0.5]), &DVector::from_vec(vec![-0.2, 1.0])).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.1, 0.2, -0.1, 0.9]);
        let g = obj.gradient(&a).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let (mut ap, mut am) = (a.clone(), a.clone());
                ap[(i, j)] += h;
                am[(i, j)] -= h;
                let fd = (obj.value(&ap).unwrap() - obj.value(&am).unwrap()) / (2.0 * h);
                assert!((fd - g[(i, j)]).abs() < 1e-7);
            }
        }
    }
}
