use bflo::belief::{BeliefState, Variant};
use bflo::flow::{self, axis_scale, FlowConfig, Sign};
use bflo::learner::{Bflo, LearnerConfig, OnlineLearner};
use bflo::model::{Features, LabeledExample, ModelSpec};
use bflo::pseudo::{bayes_update_gaussian, extract_pseudo};
use bflo::verify;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn closed_form_matches_oracle_in_low_dimensions() {
    for d in 1..=3 {
        let r = verify::oracle_gap(d, 200, 0);
        assert!(r.passes(), "{r:?}");
    }
}

#[test]
fn constraint_is_exact_across_variants() {
    assert!(verify::constraint_violation(&[1, 2, 5, 20], 1000, 7) <= verify::CONSTRAINT_TOLERANCE);
}

#[test]
fn spot_values() {
    assert!((axis_scale(1.0f64, 2.0, Sign::Plus) - 1.366025).abs() <= 1e-6);
    assert!((axis_scale(1.0f64, 0.0, Sign::Plus) - 0.707107).abs() <= 1e-6);
    let b = BeliefState::<f64>::isotropic(Variant::Full, DVector::zeros(2), 1.0).unwrap();
    let (w, w_new) = (DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![1.0, 1.0]));
    let a = flow::solve(&b, &w, &w_new, &FlowConfig::default()).unwrap().matrix(2);
    let expected = DMatrix::from_row_slice(2, 2, &[0.809017, -0.707107, 0.809017, 0.707107]);
    assert!((a - expected).amax() <= 1e-4);
}

#[test]
fn variance_follows_the_sign_of_the_step_projection() {
    let cfg = FlowConfig::default();
    for variant in [Variant::Full, Variant::Diagonal] {
        let prior = BeliefState::<f64>::isotropic(variant, DVector::zeros(1), 1.0).unwrap();
        for i in 0..41 {
            for j in 0..41 {
                let (d, dn) = (-4.0 + 0.2 * i as f64, -4.0 + 0.2 * j as f64);
                let (post, _) = flow::update(&prior, &DVector::from_element(1, d), &DVector::from_element(1, dn), &cfg).unwrap();
                let ds = post.spectrum()[0].sqrt() - 1.0;
                let key = dn * d - d * d;
                if key.abs() < 1e-12 {
                    assert!(ds.abs() < 1e-12, "{variant:?} Δ={d} Δ′={dn}");
                } else {
                    assert_eq!(ds.signum(), key.signum(), "{variant:?} Δ={d} Δ′={dn}");
                }
            }
        }
    }
}

fn stream(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<LabeledExample<f64>> {
    let truth: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let s: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum();
            LabeledExample::new(Features::Dense(x), usize::from(s > 0.0))
        })
        .collect()
}

#[test]
fn pseudo_datapoints_reproduce_the_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..500 {
        let d = 1 + k % 4;
        let c = verify::random_case(&mut rng, d);
        let prior = match k % 3 {
            0 => BeliefState::from_covariance(c.mean.clone(), c.cov.clone()),
            1 => BeliefState::diagonal(c.mean.clone(), c.cov.diagonal()),
            _ => BeliefState::spherical(c.mean.clone(), c.cov.trace() / d as f64),
        }
        .unwrap();
        let (post, _) = flow::update(&prior, &c.w, &c.w_new, &FlowConfig::default()).unwrap();
        let p = extract_pseudo(&prior, &post).unwrap();
        let r = bayes_update_gaussian(&prior, &p).unwrap();
        let cov = post.covariance_matrix();
        assert!((r.covariance_matrix() - &cov).norm() <= 1e-8 * cov.norm());
        assert!((r.mean() - post.mean()).norm() <= 1e-8 * post.mean().norm().max(1.0));
    }
}

#[test]
fn non_expansive_runs_shrink_and_have_psd_pseudo_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for variant in [Variant::Full, Variant::Diagonal, Variant::Spherical] {
        let data = stream(&mut rng, 5, 1000);
        let mut cfg = LearnerConfig::bflo(variant);
        cfg.non_expansive = true;
        cfg.eta = 0.3;
        cfg.sigma_init = 1.0;
        let mut learner = Bflo::<f64>::new(ModelSpec::Logistic { inputs: 5 }, &cfg, 3).unwrap();
        for ex in &data {
            let before = learner.belief().unwrap().clone();
            learner.step(ex).unwrap();
            let after = learner.belief().unwrap();
            assert!(after.log_det() <= before.log_det() + 1e-10);
            if let Ok(p) = extract_pseudo(&before, after) {
                assert!(p.is_positive_semidefinite());
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in 0..200 {
        let spec = if k < 100 {
            ModelSpec::Logistic { inputs: rng.random_range(1..10) }
        } else {
            ModelSpec::Mlp {
                inputs: rng.random_range(1..8),
                hidden: rng.random_range(1..7),
                outputs: [1, 2, 3, 5][rng.random_range(0..4)],
            }
        };
        let params: Vec<f64> = (0..spec.num_params()).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.7).collect();
        let x = Features::Dense((0..spec.inputs()).map(|_| rng.sample(StandardNormal)).collect());
        let label = rng.random_range(0..spec.outputs().max(2));
        let g = spec.gradient(&params, &x, label).unwrap();
        let fd = spec.finite_diff_gradient(&params, &x, label, 1e-5).unwrap();
        assert!((&g - &fd).norm() <= 1e-5 * g.norm().max(fd.norm()).max(1e-8), "{spec:?}");
    }
}
