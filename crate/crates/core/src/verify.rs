//! Randomized conformance checks of the flow solvers against the numerical oracle.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::belief::{kl_divergence, BeliefState, Variant};
use crate::flow::{self, optimality_residual, solve_2x2, FlowConfig, FlowSolution, Sign};
use crate::oracle::{axis_kl, minimize_axis_kl, minimize_flow_kl, OracleOptions};

pub const GAP_TOLERANCE: f64 = 1e-5;
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;
pub const CONSTRAINT_TOLERANCE: f64 = 1e-9;

/// A random prior, a sample from it, and a perturbed target.
#[derive(Debug, Clone)]
pub struct Case {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub w: DVector<f64>,
    pub w_new: DVector<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Random SPD covariance with log-eigenvalues uniform in `[-spread, spread]`.
pub fn random_covariance(rng: &mut ChaCha8Rng, d: usize, spread: f64) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    let l = DVector::from_fn(d, |_, _| rng.random_range(-spread..=spread).exp());
    let mut c = &q * DMatrix::from_diagonal(&l) * q.transpose();
    c = (&c + c.transpose()) * 0.5;
    c
}

pub fn random_case(rng: &mut ChaCha8Rng, d: usize) -> Case {
    let mean = gaussian(rng, d);
    let cov = random_covariance(rng, d, 1.5);
    let chol = cov.clone().cholesky().expect("spd");
    let w = &mean + chol.l() * gaussian(rng, d);
    let step = rng.random_range(0.05f64.ln()..3.0f64.ln()).exp();
    let dir = gaussian(rng, d);
    let w_new = &w + dir.normalize() * step;
    Case { mean, cov, w, w_new }
}

#[derive(Debug, Clone, Serialize)]
pub struct DimReport {
    pub dim: usize,
    pub cases: usize,
    /// Worst `KL(closed form) − KL(oracle)` for the full variant.
    pub max_gap_full: f64,
    /// Worst gap for the diagonal variant against the per-coordinate oracle.
    pub max_gap_diagonal: f64,
    /// Worst optimality-condition residual of the 2×2 block.
    pub max_residual: f64,
}

impl DimReport {
    pub fn passes(&self) -> bool {
        self.max_gap_full <= GAP_TOLERANCE && self.max_gap_diagonal <= GAP_TOLERANCE && self.max_residual <= RESIDUAL_TOLERANCE
    }
}

/// Closed-form vs oracle KL over `cases` random problems in dimension `d`.
pub fn oracle_gap(d: usize, cases: usize, seed: u64) -> DimReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (d as u64) << 32);
    let cfg = FlowConfig::default();
    let mut report = DimReport {
        dim: d,
        cases,
        max_gap_full: f64::NEG_INFINITY,
        max_gap_diagonal: f64::NEG_INFINITY,
        max_residual: 0.0,
    };
    for k in 0..cases {
        let c = random_case(&mut rng, d);
        let prior = BeliefState::from_covariance(c.mean.clone(), c.cov.clone()).expect("valid prior");
        let (post, sol) = flow::update(&prior, &c.w, &c.w_new, &cfg).expect("flow");
        let kl = kl_divergence(&post, &prior).expect("kl");
        let opts = OracleOptions {
            seed: k as u64,
            ..Default::default()
        };
        let oracle = minimize_flow_kl(&c.mean, &c.cov, &c.w, &c.w_new, &opts).expect("oracle");
        report.max_gap_full = report.max_gap_full.max(kl - oracle.kl);
        if let FlowSolution::Full(f) = &sol {
            if f.branch == flow::FullBranch::Plane {
                report.max_residual = report.max_residual.max(optimality_residual(&f.a2, f.u, f.v_par, f.v_perp));
            }
        }

        let variances = c.cov.diagonal();
        let diag = BeliefState::diagonal(c.mean.clone(), variances.clone()).expect("valid prior");
        let (post, _) = flow::update(&diag, &c.w, &c.w_new, &cfg).expect("flow");
        let kl = kl_divergence(&post, &diag).expect("kl");
        let best: f64 = (0..d)
            .map(|i| {
                let sd = variances[i].sqrt();
                let (u, v) = ((c.w[i] - c.mean[i]) / sd, (c.w_new[i] - c.mean[i]) / sd);
                axis_kl(u, v, minimize_axis_kl(u, v))
            })
            .sum();
        report.max_gap_diagonal = report.max_gap_diagonal.max(kl - best);
    }
    report.max_residual = report.max_residual.max(residual_sweep(cases, seed ^ 0x5eed ^ d as u64));
    report
}

/// Worst optimality residual of `solve_2x2` over random `(u, v∥, v⊥)` and all four branches.
pub fn residual_sweep(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let u = rng.random_range(0.0..4.0);
        let vp = rng.random_range(-4.0..4.0);
        let vq = rng.random_range(0.01..4.0);
        for d1 in [Sign::Plus, Sign::Minus] {
            for d2 in [Sign::Plus, Sign::Minus] {
                let a = solve_2x2(u, vp, vq, d1, d2, 1e-10).expect("non-degenerate");
                worst = worst.max(optimality_residual(&a, u, vp, vq));
            }
        }
    }
    worst
}

/// Worst `‖A w + b − w′‖ / (1 + ‖w′‖)` over random problems for every variant,
/// with `b` recovered from the posterior as `μ′ − A μ`.
pub fn constraint_violation(dims: &[usize], cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FlowConfig::default();
    let mut worst: f64 = 0.0;
    for k in 0..cases {
        let d = dims[k % dims.len()];
        let c = random_case(&mut rng, d);
        let variant = [Variant::Full, Variant::Diagonal, Variant::Spherical][(k / dims.len()) % 3];
        let prior = match variant {
            Variant::Full => BeliefState::from_covariance(c.mean.clone(), c.cov.clone()),
            Variant::Diagonal => BeliefState::diagonal(c.mean.clone(), c.cov.diagonal()),
            Variant::Spherical => BeliefState::spherical(c.mean.clone(), c.cov.trace() / d as f64),
        }
        .expect("valid prior");
        let sol = flow::solve(&prior, &c.w, &c.w_new, &cfg).expect("flow");
        let post = flow::apply_flow(&prior, &sol, &c.w, &c.w_new).expect("apply");
        let a = sol.matrix(d);
        let b = post.mean() - &a * prior.mean();
        let err = (&a * &c.w + b - &c.w_new).norm() / (1.0 + c.w_new.norm());
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_oracle_sweep_passes() {
        for d in 1..=2 {
            let r = oracle_gap(d, 10, 1);
            assert!(r.passes(), "{r:?}");
        }
    }

    #[test]
    fn constraint_holds_on_a_small_sweep() {
        assert!(constraint_violation(&[1, 3], 30, 2) <= CONSTRAINT_TOLERANCE);
    }
}
