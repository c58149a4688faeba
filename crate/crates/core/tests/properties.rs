use bflo::belief::{kl_divergence, BeliefState, Variant};
use bflo::data::{self, CsvOptions, Dataset, Representation};
use bflo::flow::{self, clamp_nonexpansive, FlowConfig};
use bflo::harness::{aggregate, rank, RunReport};
use bflo::model::{Features, HiddenMode, LabeledExample, ModelSpec, Workspace};
use bflo::pseudo::{bayes_update_gaussian, extract_pseudo};
use bflo::snapshot::{read_snapshots, SnapshotWriter};
use bflo::verify::random_case;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn variant_of(k: u8) -> Variant {
    [Variant::Full, Variant::Diagonal, Variant::Spherical][k as usize % 3]
}

fn prior_for(variant: Variant, seed: u64, d: usize) -> (BeliefState<f64>, DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random_case(&mut rng, d);
    let b = match variant {
        Variant::Full => BeliefState::from_covariance(c.mean, c.cov),
        Variant::Diagonal => BeliefState::diagonal(c.mean, c.cov.diagonal()),
        Variant::Spherical => {
            let s = c.cov.trace() / d as f64;
            BeliefState::spherical(c.mean, s)
        }
    }
    .unwrap();
    (b, c.w, c.w_new)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_hits_the_target(seed in any::<u64>(), d in 1usize..7, k in 0u8..3) {
        let (b, w, w_new) = prior_for(variant_of(k), seed, d);
        let sol = flow::solve(&b, &w, &w_new, &FlowConfig::default()).unwrap();
        let moved = sol.transform(&w) + sol.offset(&w, &w_new);
        prop_assert!((moved - &w_new).norm() <= 1e-9 * (1.0 + w_new.norm()));
    }

    #[test]
    fn posterior_is_the_pushforward(seed in any::<u64>(), d in 1usize..6, k in 0u8..3) {
        let (b, w, w_new) = prior_for(variant_of(k), seed, d);
        let (post, sol) = flow::update(&b, &w, &w_new, &FlowConfig::default()).unwrap();
        let a = sol.matrix(d);
        let cov = &a * b.covariance_matrix() * a.transpose();
        let scale = cov.amax().max(1.0);
        prop_assert!((post.covariance_matrix() - cov).amax() <= 1e-8 * scale);
        prop_assert!(post.validate(0.0).is_ok());
        prop_assert!(kl_divergence(&post, &b).unwrap() >= -1e-12);
    }

    #[test]
    fn no_move_means_no_change(seed in any::<u64>(), d in 1usize..6, k in 0u8..3) {
        let (b, w, _) = prior_for(variant_of(k), seed, d);
        let (post, _) = flow::update(&b, &w, &w, &FlowConfig::default()).unwrap();
        prop_assert_eq!(post, b);
    }

    #[test]
    fn clamped_flows_do_not_expand(seed in any::<u64>(), d in 1usize..6, k in 0u8..3) {
        let (b, w, w_new) = prior_for(variant_of(k), seed, d);
        let sol = clamp_nonexpansive(flow::solve(&b, &w, &w_new, &FlowConfig::default()).unwrap());
        prop_assert!(sol.max_stretch() <= 1.0 + 1e-12);
        let cfg = FlowConfig::default().non_expansive(true);
        let (post, _) = flow::update(&b, &w, &w_new, &cfg).unwrap();
        prop_assert!(post.log_det() <= b.log_det() + 1e-10);
    }

    #[test]
    fn pseudo_datapoint_reconstructs_posterior(seed in any::<u64>(), d in 1usize..5, k in 0u8..3) {
        let (b, w, w_new) = prior_for(variant_of(k), seed, d);
        let (post, _) = flow::update(&b, &w, &w_new, &FlowConfig::default()).unwrap();
        if let Ok(p) = extract_pseudo(&b, &post) {
            let r = bayes_update_gaussian(&b, &p).unwrap();
            let c = post.covariance_matrix();
            prop_assert!((r.covariance_matrix() - &c).norm() <= 1e-8 * c.norm());
            prop_assert!((r.mean() - post.mean()).norm() <= 1e-8 * post.mean().norm().max(1.0));
        }
    }

    #[test]
    fn snapshots_round_trip(seed in any::<u64>(), d in 1usize..5, k in 0u8..3, rounds in 1usize..5) {
        let (b, _, _) = prior_for(variant_of(k), seed, d);
        let mut wr = SnapshotWriter::new(Vec::new(), b.variant(), d).unwrap();
        for r in 0..rounds {
            wr.write(r as u64 * 3, &b).unwrap();
        }
        let back = read_snapshots(&wr.finish().unwrap()[..]).unwrap();
        prop_assert_eq!(back.len(), rounds);
        prop_assert!(back.iter().all(|(_, s)| s == &b));
    }

    #[test]
    fn mlp_layout_is_a_partition(inputs in 1usize..20, hidden in 1usize..10, outputs in 1usize..6) {
        let spec = ModelSpec::Mlp { inputs, hidden, outputs };
        let l = spec.layout();
        prop_assert_eq!(l.w1.start, 0);
        prop_assert_eq!(l.w1.end, l.b1.start);
        prop_assert_eq!(l.b1.end, l.w2.start);
        prop_assert_eq!(l.w2.end, l.b2.start);
        prop_assert_eq!(l.b2.end, spec.num_params());
        prop_assert_eq!(spec.num_params(), hidden * (inputs + 1) + outputs * (hidden + 1));
    }

    #[test]
    fn sparse_gradient_matches_dense(
        seed in any::<u64>(),
        entries in proptest::collection::btree_map(0u32..12, -2.0f64..2.0, 1..6),
        hidden in 1usize..5,
        outputs in 1usize..4,
    ) {
        use rand::Rng;
        let spec = ModelSpec::Mlp { inputs: 12, hidden, outputs };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<f64> = (0..spec.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Features::sparse(entries.into_iter().collect());
        let label = rng.random_range(0..outputs.max(2));
        let dense = spec.gradient(&params, &x, label).unwrap();
        let mut ws = Workspace::new(&spec);
        let mut g = vec![0.0; spec.num_params()];
        let (_, loss) = spec.loss_and_gradient(&params, &x, label, &HiddenMode::Plain, &mut ws, &mut g).unwrap();
        let mut support = Vec::new();
        spec.support(&x, &mut support);
        for &i in &support {
            prop_assert!((g[i] - dense[i]).abs() <= 1e-12);
        }
        let outside: f64 = (0..dense.len()).filter(|i| !support.contains(i)).map(|i| dense[i].abs()).sum();
        prop_assert_eq!(outside, 0.0);
        let z = spec.forward(&params, &x).unwrap();
        prop_assert!((spec.loss(label, &z) - loss).abs() <= 1e-12);
    }

    #[test]
    fn libsvm_round_trip(rows in proptest::collection::vec(
        (any::<bool>(), proptest::collection::btree_map(0u32..30, -5.0f64..5.0, 0..8)), 1..20))
    {
        let examples: Vec<LabeledExample<f64>> = rows
            .into_iter()
            .map(|(y, m)| LabeledExample::new(Features::sparse(m.into_iter().filter(|(_, v)| *v != 0.0).collect()), usize::from(y)))
            .collect();
        let data = Dataset { name: "p".into(), examples, features: 30, classes: 2, repr: Representation::Sparse };
        let mut buf = Vec::new();
        data::serialize_libsvm(&data, &mut buf).unwrap();
        let back: Dataset<f64> = data::parse_libsvm(&buf[..], "p", Some(30)).unwrap();
        prop_assert_eq!(back.len(), data.len());
        for (a, b) in back.examples.iter().zip(&data.examples) {
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.features.to_dense(30), b.features.to_dense(30));
        }
    }

    #[test]
    fn csv_round_trip(rows in proptest::collection::vec((0usize..3, proptest::collection::vec(-9.0f64..9.0, 4)), 3..15)) {
        let examples: Vec<LabeledExample<f64>> =
            rows.into_iter().map(|(y, x)| LabeledExample::new(Features::Dense(x), y)).collect();
        let classes = examples.iter().map(|e| e.label).max().unwrap() + 1;
        let data = Dataset { name: "c".into(), examples, features: 4, classes: classes.max(2), repr: Representation::Dense };
        let mut buf = Vec::new();
        data::serialize_csv(&data, &mut buf).unwrap();
        let back: Dataset<f64> = data::parse_csv(&buf[..], "c", &CsvOptions::default()).unwrap();
        prop_assert_eq!(back.len(), data.len());
        for (a, b) in back.examples.iter().zip(&data.examples) {
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.features.to_dense(4), b.features.to_dense(4));
        }
    }

    #[test]
    fn split_partitions_and_flip_counts(n in 2usize..60, frac in 0.05f64..0.95, seed in any::<u64>(), noise in 0.0f64..1.0) {
        let examples: Vec<LabeledExample<f64>> =
            (0..n).map(|i| LabeledExample::new(Features::Dense(vec![i as f64]), i % 2)).collect();
        let data = Dataset { name: "s".into(), examples, features: 1, classes: 2, repr: Representation::Dense };
        let (tr, te) = data::split_shuffle(&data, frac, seed, true).unwrap();
        prop_assert_eq!(tr.len() + te.len(), n);
        let mut ids: Vec<i64> = tr.examples.iter().chain(&te.examples).map(|e| e.features.to_dense(1)[0] as i64).collect();
        ids.sort();
        prop_assert_eq!(ids, (0..n as i64).collect::<Vec<_>>());
        let flipped = data::flip_labels(&data, noise, seed).unwrap();
        prop_assert_eq!(&flipped.examples, &data::flip_labels(&data, noise, seed).unwrap().examples);
        for (f, e) in flipped.examples.iter().zip(&data.examples) {
            prop_assert_eq!(f.truth(), e.label);
        }
        let none = data::flip_labels(&data, 0.0, seed).unwrap();
        prop_assert!(none.examples.iter().all(|e| e.label == e.truth()));
        let all = data::flip_labels(&data, 1.0, seed).unwrap();
        prop_assert!(all.examples.iter().all(|e| e.label != e.truth()));
    }

    #[test]
    fn aggregate_ignores_run_order(errs in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..12), shift in 0usize..12) {
        let reports: Vec<RunReport> = errs.iter().enumerate().map(|(i, &(o, f))| RunReport {
            run_index: i, seed: i as u64, family: "f".into(), rounds: 10, mistakes: 1,
            online_error: o, final_error: f, test_examples: 5, wall_time_seconds: 0.0,
            mistake_stream: vec![], curve: vec![], snapshots: None,
        }).collect();
        let mut rotated = reports.clone();
        rotated.rotate_left(shift % reports.len());
        rotated.reverse();
        prop_assert_eq!(aggregate(&reports).unwrap(), aggregate(&rotated).unwrap());
    }

    #[test]
    fn ranks_sum_to_triangle(values in proptest::collection::vec(0u8..5, 1..10)) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let r = rank(&v);
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] { prop_assert!(r[i] < r[j]); }
                if v[i] == v[j] { prop_assert_eq!(r[i], r[j]); }
            }
        }
    }
}
