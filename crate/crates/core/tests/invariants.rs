use ndarray::{Array2, Axis};
use proptest::prelude::*;

use fewshot_ot::cohort::{self, LabelledSet, Mode, SplitOutcome, SynthConfig};
use fewshot_ot::downstream;
use fewshot_ot::evalharness::f1_scores;
use fewshot_ot::fewshot;
use fewshot_ot::numcore::{adam_step, init_params, AdamState, GradientSet};
use fewshot_ot::otcore::{self, SinkhornConfig};
use fewshot_ot::rng;
use fewshot_ot::siamese::{PairData, SiameseModel, Wiring};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn tight() -> SinkhornConfig {
    SinkhornConfig {
        max_iterations: 5000,
        tolerance: 1e-12,
        ..SinkhornConfig::default()
    }
}

fn labelled(max: usize, dim: usize) -> impl Strategy<Value = LabelledSet> {
    (1..=max).prop_flat_map(move |n| {
        (matrix(n, dim), proptest::collection::vec(0u8..=1, n))
            .prop_map(|(x, y)| LabelledSet::new(x, y).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sinkhorn_is_symmetric((a, b) in (2usize..7, 1usize..4).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d)))) {
        let (ab, p1) = otcore::sinkhorn(a.view(), b.view(), &tight()).unwrap();
        let (ba, p2) = otcore::sinkhorn(b.view(), a.view(), &tight()).unwrap();
        // nearly degenerate costs can stall short of the tolerance
        prop_assume!(p1.converged && p2.converged);
        prop_assert!((ab - ba).abs() <= 1e-9, "{} vs {}", ab, ba);
    }

    #[test]
    fn sinkhorn_scales_with_the_embedding(
        (a, b) in (2usize..7, 2usize..7, 1usize..4).prop_flat_map(|(m, n, d)| (matrix(m, d), matrix(n, d))),
        c in 0.1f64..10.0,
    ) {
        let cfg = SinkhornConfig::default();
        let (d1, _) = otcore::sinkhorn(a.view(), b.view(), &cfg).unwrap();
        let (d2, _) = otcore::sinkhorn((&a * c).view(), (&b * c).view(), &cfg).unwrap();
        prop_assert!((d2 - c * d1).abs() <= 1e-9 * (c * d1).max(1e-12), "{} vs {}", d2, c * d1);
    }

    #[test]
    fn converged_plans_meet_both_marginals(
        (a, b) in (1usize..12, 1usize..12, 1usize..5).prop_flat_map(|(m, n, d)| (matrix(m, d), matrix(n, d))),
    ) {
        let cfg = SinkhornConfig { max_iterations: 2000, ..SinkhornConfig::default() };
        let (_, plan) = otcore::sinkhorn(a.view(), b.view(), &cfg).unwrap();
        prop_assume!(plan.converged);
        let (m, n) = plan.coupling.dim();
        for s in plan.coupling.sum_axis(Axis(1)) {
            prop_assert!((s - 1.0 / m as f64).abs() <= 1e-6);
        }
        for s in plan.coupling.sum_axis(Axis(0)) {
            prop_assert!((s - 1.0 / n as f64).abs() <= 1e-6);
        }
        prop_assert!(plan.coupling.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cost_matrix_is_a_metric_on_one_set(a in (1usize..8, 1usize..5).prop_flat_map(|(n, d)| matrix(n, d))) {
        let c = otcore::cost_matrix(a.view(), a.view()).unwrap();
        for i in 0..a.nrows() {
            prop_assert_eq!(c.0[[i, i]], 0.0);
            for j in 0..a.nrows() {
                prop_assert_eq!(c.0[[i, j]], c.0[[j, i]]);
                prop_assert!(c.0[[i, j]] >= 0.0);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_bounded(seed in any::<u64>(), x in matrix(4, 91)) {
        let p = init_params(seed, &[91, 32, 16, 1]).unwrap();
        let t1 = p.forward(x.view()).unwrap();
        let t2 = p.forward(x.view()).unwrap();
        prop_assert_eq!(t1.output(), t2.output());
        prop_assert!(t1.output().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert_eq!(t1.penultimate().ncols(), 16);
    }

    #[test]
    fn adam_leaves_parameters_alone_on_zero_gradient(seed in any::<u64>(), steps in 1usize..5) {
        let mut p = init_params(seed, &[5, 4, 1]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let zero = GradientSet::zeros_like(&p);
        for _ in 0..steps {
            adam_step(&mut p, &zero, &mut state).unwrap();
        }
        prop_assert_eq!(p, before);
    }

    #[test]
    fn swapping_pair_sides_keeps_the_loss(seed in any::<u64>(), left in matrix(6, 5), right in matrix(6, 5), sim in proptest::collection::vec(0u8..=1, 6)) {
        for wiring in [Wiring::ScoreDifference, Wiring::EmbeddingDifference] {
            let model = SiameseModel::new(seed, &[5, 4, 3, 1], wiring).unwrap();
            let ab = PairData { left: left.clone(), right: right.clone(), similarity: sim.clone() };
            let ba = PairData { left: right.clone(), right: left.clone(), similarity: sim.clone() };
            let (l1, _) = fewshot_ot::siamese::contrastive_loss(&model, &ab).unwrap();
            let (l2, _) = fewshot_ot::siamese::contrastive_loss(&model, &ba).unwrap();
            prop_assert!((l1 - l2).abs() <= 1e-12);
        }
    }

    #[test]
    fn selection_matches_brute_force_scoring(
        pool in labelled(20, 2),
        anchors in labelled(4, 2),
        n in 1usize..25,
    ) {
        let got = fewshot::select_closest(&pool, &anchors, n).unwrap();
        let has = |l: u8| anchors.labels.contains(&l);
        let dist = |i: usize, j: usize| {
            let (p, a) = (pool.features.row(i), anchors.features.row(j));
            ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt()
        };
        let score = |i: usize, matched: bool| {
            (0..anchors.len())
                .filter(|&j| !matched || anchors.labels[j] == pool.labels[i])
                .map(|j| dist(i, j))
                .fold(f64::INFINITY, f64::min)
        };
        let mut matched: Vec<(f64, usize)> = (0..pool.len()).filter(|&i| has(pool.labels[i])).map(|i| (score(i, true), i)).collect();
        let mut other: Vec<(f64, usize)> = (0..pool.len()).filter(|&i| !has(pool.labels[i])).map(|i| (score(i, false), i)).collect();
        matched.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        other.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = if matched.is_empty() || other.is_empty() {
            matched.iter().chain(&other).take(n).map(|p| p.1).collect()
        } else {
            let mut km = n.div_ceil(2).min(matched.len());
            let ko = (n - km).min(other.len());
            km = (n - ko).min(matched.len());
            matched[..km].iter().chain(&other[..ko]).map(|p| p.1).collect()
        };
        let rows: Vec<usize> = got.set.origin.clone();
        let expected_origin: Vec<usize> = expected.iter().map(|&i| pool.origin[i]).collect();
        prop_assert_eq!(rows, expected_origin);
        prop_assert_eq!(got.len(), n.min(pool.len()));
    }

    #[test]
    fn pairs_are_labelled_by_class_difference(pool in labelled(20, 2), anchors in labelled(5, 2), seed in any::<u64>()) {
        let sel = fewshot::select_closest(&pool, &anchors, 12).unwrap();
        let mut r = rng::stream(seed, &[]);
        let batch = fewshot::make_pairs(&sel, &anchors, &mut r).unwrap();
        prop_assert_eq!(batch.len(), 2 * sel.len());
        for p in &batch.pairs {
            let differ = sel.set.labels[p.selected] != anchors.labels[p.anchor];
            prop_assert_eq!(p.similarity, u8::from(differ));
        }
    }

    #[test]
    fn resampling_hits_the_exact_count(p in 0.0f64..=1.0, m in 1usize..60, seed in any::<u64>()) {
        let labels: Vec<u8> = (0..10).map(|i| u8::from(i < 4)).collect();
        let set = LabelledSet::new(Array2::zeros((10, 2)), labels).unwrap();
        let mut r = rng::stream(seed, &[]);
        let s = fewshot::resample_base_rate(&set, p, m, &mut r).unwrap();
        prop_assert_eq!(s.set.len(), m);
        prop_assert_eq!(s.set.class_count(1), (p * m as f64).round() as usize);
    }

    #[test]
    fn pca_ignores_rotations(x in matrix(12, 4), angle in 0.0f64..std::f64::consts::TAU) {
        let (c, s) = (angle.cos(), angle.sin());
        let mut rot = Array2::<f64>::eye(4);
        rot[[0, 0]] = c; rot[[0, 1]] = -s; rot[[1, 0]] = s; rot[[1, 1]] = c;
        rot[[2, 2]] = c; rot[[2, 3]] = s; rot[[3, 2]] = -s; rot[[3, 3]] = c;
        let Ok((a, _)) = downstream::pca_project(x.view()) else { return Ok(()) };
        let (b, _) = downstream::pca_project(x.dot(&rot).view()).unwrap();
        for k in 0..2 {
            prop_assert!((a.explained[k] - b.explained[k]).abs() <= 1e-9);
        }
        let gram = a.components.dot(&a.components.t());
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[[i, j]] - want).abs() <= 1e-9);
            }
        }
        prop_assert!(a.explained[0] >= a.explained[1] && a.explained[1] >= 0.0 && a.explained[0] <= 1.0);
    }

    #[test]
    fn svm_predictions_are_rowwise(x in matrix(10, 3), dup in 0usize..10) {
        let labels: Vec<u8> = (0..10).map(|i| u8::from(i % 3 == 0)).collect();
        let model = downstream::svm_train(x.view(), &labels, &downstream::SvmConfig { epochs: 200, ..Default::default() }).unwrap();
        let pred = downstream::svm_predict(&model, x.view()).unwrap();
        let mut doubled = x.clone();
        doubled.push_row(x.row(dup)).unwrap();
        let pred2 = downstream::svm_predict(&model, doubled.view()).unwrap();
        prop_assert_eq!(&pred2[..10], &pred[..]);
        prop_assert_eq!(pred2[10], pred[dup]);
    }

    #[test]
    fn f1_values_are_bounded(pairs in proptest::collection::vec((0u8..=1, 0u8..=1), 1..40)) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let f = f1_scores(&pred, &truth).unwrap();
        for v in [f.stress, f.nostress, f.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((f.macro_f1 - 0.5 * (f.stress + f.nostress)).abs() < 1e-15);
    }

    #[test]
    fn splits_partition_each_couple_in_time_order(seed in 0u64..1000) {
        let c = cohort::generate_cohort(&SynthConfig { couples: 6, seed, ..SynthConfig::default() }).unwrap();
        for couple in c.couple_ids() {
            for mode in [Mode::FewShot, Mode::OneShot] {
                let SplitOutcome::Ready(s) = cohort::split_target(&c, couple, mode).unwrap() else { continue };
                let own = c.couple(couple).unwrap();
                prop_assert_eq!(s.labelled.len() + s.unlabelled.nrows(), own.len());
                let mut all: Vec<usize> = s.labelled.origin.iter().chain(&s.unlabelled_origin).copied().collect();
                all.sort_unstable();
                let mut expect = own.to_vec();
                expect.sort_unstable();
                prop_assert_eq!(all, expect);
                for person in own.iter().map(|&i| &c.sample(i).participant_id) {
                    let hours = |rows: &[usize]| -> Vec<u32> {
                        rows.iter().filter(|&&i| &c.sample(i).participant_id == person).map(|&i| c.sample(i).hour_index).collect()
                    };
                    let (a, b) = (hours(&s.labelled.origin), hours(&s.unlabelled_origin));
                    if let (Some(last_a), Some(first_b)) = (a.iter().max(), b.iter().min()) {
                        prop_assert!(last_a < first_b);
                    }
                }
                prop_assert!(s.pool.origin.iter().all(|&i| c.sample(i).couple_id != couple));
                if mode == Mode::OneShot {
                    prop_assert_eq!(s.labelled.len(), 1);
                } else {
                    prop_assert_eq!(s.labelled.len(), cohort::early_count(own.len()));
                }
            }
        }
    }
}

#[test]
fn generator_base_rates_follow_the_beta_mean() {
    let cfg = SynthConfig {
        couples: 1000,
        ..SynthConfig::default()
    };
    let rates = cfg.base_rates().unwrap();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let target = cfg.alpha / (cfg.alpha + cfg.beta);
    assert!((mean - target).abs() <= 0.03, "{mean} vs {target}");
}

#[test]
fn generated_cohort_survives_a_csv_round_trip() {
    let c = cohort::generate_cohort(&SynthConfig {
        couples: 8,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.csv");
    cohort::write_csv(&c, &path).unwrap();
    let back = cohort::load_csv(&path, cohort::LoadOptions::default()).unwrap();
    assert_eq!(back, c);
}
