use ndarray::Array2;

use fewshot_ot::cohort::{self, LabelledSet, Mode, SplitOutcome, SynthConfig};
use fewshot_ot::evalharness::{self, f1_scores, ExperimentConfig, Variant};
use fewshot_ot::fewshot;
use fewshot_ot::numcore::{adam_step, Activation, AdamState, Dense, NetworkParams};
use fewshot_ot::rng;
use fewshot_ot::siamese::{
    self, LossVariant, PenaltyConfig, SiameseModel, TrainConfig, TrainInputs, Wiring,
};

fn small_cohort(couples: usize, seed: u64) -> cohort::Cohort {
    cohort::generate_cohort(&SynthConfig {
        couples,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn quick_config(variants: &[Variant]) -> ExperimentConfig {
    ExperimentConfig {
        variants: variants.to_vec(),
        selected_few_shot: 24,
        selected_one_shot: 12,
        epochs_few_shot: 2,
        epochs_one_shot: 1,
        parallel_folds: 1,
        ..ExperimentConfig::default()
    }
}

struct Fold {
    split: cohort::TargetSplit,
    selected: fewshot::SelectedPool,
}

fn first_fold(c: &cohort::Cohort, n: usize) -> Fold {
    let target = c.couple_ids().next().unwrap().to_owned();
    let SplitOutcome::Ready(split) = cohort::split_target(c, &target, Mode::FewShot).unwrap()
    else {
        panic!("fold skipped");
    };
    let selected = fewshot::select_closest(&split.pool, &split.labelled, n).unwrap();
    Fold {
        split: *split,
        selected,
    }
}

fn train(fold: &Fold, cfg: &TrainConfig, seed: u64) -> siamese::TrainOutcome {
    let inputs = TrainInputs {
        selected: &fold.selected,
        anchors: &fold.split.labelled,
        unlabelled: fold.split.unlabelled.view(),
    };
    let model = SiameseModel::new(seed, &[91, 32, 16, 1], Wiring::ScoreDifference).unwrap();
    siamese::train_snn(model, &inputs, cfg, "test", false).unwrap()
}

#[test]
fn loss_log_is_additive_and_takes_the_minimum() {
    let c = small_cohort(4, 1);
    let fold = first_fold(&c, 40);
    let cfg = TrainConfig {
        epochs: 4,
        variant: LossVariant::Proposed,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(&fold, &cfg, 5);
    assert_eq!(out.log.len(), 4);
    for row in &out.log {
        assert!((row.total - (row.contrastive + row.lambda * row.d_star)).abs() <= 1e-12);
        assert_eq!(row.wasserstein.len(), 3);
        for &(_, d) in &row.wasserstein {
            assert!(row.d_star <= d + 1e-12, "{} > {d}", row.d_star);
        }
        assert!(row.selected_rate.is_some());
    }
}

#[test]
fn baseline_one_logs_no_penalty() {
    let c = small_cohort(4, 1);
    let fold = first_fold(&c, 40);
    let cfg = TrainConfig {
        epochs: 3,
        variant: LossVariant::Baseline1,
        ..TrainConfig::default()
    };
    for row in train(&fold, &cfg, 1).log {
        assert!(row.wasserstein.is_empty());
        assert_eq!(row.total, row.contrastive);
        assert!(row.selected_rate.is_none());
    }
}

#[test]
fn baseline_two_uses_the_labelled_rate() {
    let c = small_cohort(4, 2);
    let fold = first_fold(&c, 40);
    let labelled = fold.split.labelled.concat(&fold.selected.set).unwrap();
    let rate = labelled.class_count(1) as f64 / labelled.len() as f64;
    let cfg = TrainConfig {
        epochs: 2,
        variant: LossVariant::Baseline2,
        ..TrainConfig::default()
    };
    for row in train(&fold, &cfg, 1).log {
        assert_eq!(row.selected_rate, Some(rate));
        assert_eq!(row.wasserstein.len(), 1);
    }
}

#[test]
fn adam_descends_the_contrastive_loss_on_a_fixed_batch() {
    let mut descending = 0;
    for seed in 0..50u64 {
        let c = small_cohort(2, 100 + seed);
        let fold = first_fold(&c, 32);
        let mut r = rng::stream(seed, &[]);
        let batch = fewshot::make_pairs(&fold.selected, &fold.split.labelled, &mut r).unwrap();
        let data = siamese::PairData::gather(&batch, &fold.selected.set, &fold.split.labelled);
        let mut model = SiameseModel::new(seed, &[91, 32, 16, 1], Wiring::ScoreDifference).unwrap();
        let mut adam = AdamState::with_lr(&model.params, 1e-3);
        let mut losses = Vec::new();
        for _ in 0..20 {
            let (l, g) = siamese::contrastive_loss(&model, &data).unwrap();
            losses.push(l);
            adam_step(&mut model.params, &g, &mut adam).unwrap();
        }
        let last = siamese::contrastive_loss(&model, &data).unwrap().0;
        descending +=
            usize::from(last < losses[0] && losses.windows(2).filter(|w| w[1] > w[0]).count() <= 2);
    }
    assert!(descending >= 45, "{descending}/50 runs descended");
}

fn identity_model(dim: usize) -> SiameseModel {
    SiameseModel {
        params: NetworkParams {
            layers: vec![
                Dense {
                    weight: Array2::eye(dim),
                    bias: ndarray::Array1::zeros(dim),
                    activation: Activation::Identity,
                },
                Dense {
                    weight: Array2::ones((1, dim)),
                    bias: ndarray::Array1::zeros(1),
                    activation: Activation::Logistic,
                },
            ],
        },
        wiring: Wiring::ScoreDifference,
    }
}

#[test]
fn balanced_prototype_mixture_selects_half() {
    let labelled = LabelledSet::new(ndarray::array![[2.0, 0.0], [-2.0, 0.0]], vec![1, 0]).unwrap();
    let unlabelled = ndarray::array![[2.0, 0.0], [-2.0, 0.0], [2.0, 0.0], [-2.0, 0.0]];
    for seed in 0..10 {
        let mut r = rng::stream(seed, &[]);
        let choice = siamese::base_rate_min(
            &identity_model(2),
            &labelled,
            unlabelled.view(),
            &[0.05, 0.5, 0.95],
            &mut r,
            &PenaltyConfig::default(),
        )
        .unwrap();
        assert_eq!(choice.rate, 0.5);
        assert!(choice.distance < 1e-3);
    }
}

#[test]
fn three_couples_give_three_folds_per_variant() {
    let c = small_cohort(3, 5);
    let variants = [Variant::VanillaNn, Variant::Baseline1, Variant::Proposed];
    let report = evalharness::run_experiment(&c, &quick_config(&variants)).unwrap();
    for mode in [Mode::FewShot, Mode::OneShot] {
        for v in variants {
            let n = report
                .folds
                .iter()
                .filter(|f| f.mode == mode && f.variant == v)
                .count();
            let skipped = report
                .skipped
                .iter()
                .filter(|f| f.mode == mode && f.variant == v)
                .count();
            assert_eq!(n + skipped, 3, "{mode} {v}");
        }
    }
}

#[test]
fn single_variant_gives_one_method_row_per_mode() {
    let c = small_cohort(4, 6);
    let report = evalharness::run_experiment(&c, &quick_config(&[Variant::Baseline1])).unwrap();
    assert_eq!(report.summary.len(), 2);
    let table = report.text_table();
    assert_eq!(table.matches(Variant::Baseline1.table_label()).count(), 2);
}

#[test]
fn pooled_scores_recompute_from_fold_predictions() {
    let c = small_cohort(6, 7);
    let cfg = ExperimentConfig {
        seeds: vec![0, 1],
        ..quick_config(&[Variant::Baseline1, Variant::Baseline2])
    };
    let report = evalharness::run_experiment(&c, &cfg).unwrap();
    for row in &report.pooled {
        let folds: Vec<_> = report
            .folds
            .iter()
            .filter(|f| f.mode == row.mode && f.variant == row.variant && f.seed == row.seed)
            .collect();
        let pred: Vec<u8> = folds
            .iter()
            .flat_map(|f| f.predictions.iter().copied())
            .collect();
        let truth: Vec<u8> = folds.iter().flat_map(|f| f.truth.iter().copied()).collect();
        assert_eq!(f1_scores(&pred, &truth).unwrap(), row.pooled);
        assert_eq!(row.folds, folds.len());
    }
    let summary = report
        .summary_for(Mode::FewShot, Variant::Baseline1)
        .unwrap();
    assert_eq!(summary.seeds, 2);
    assert!(report
        .summary_csv()
        .lines()
        .next()
        .unwrap()
        .contains("macro_std"));
}

#[test]
fn same_seed_gives_identical_reports() {
    let c = small_cohort(4, 8);
    let cfg = quick_config(&[Variant::Proposed]);
    let a = evalharness::run_experiment(&c, &cfg).unwrap();
    let b = evalharness::run_experiment(
        &c,
        &ExperimentConfig {
            parallel_folds: 3,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(a.folds_csv(), b.folds_csv());
    assert_eq!(a.pooled_csv(), b.pooled_csv());
    assert_eq!(a.training_log_csv(), b.training_log_csv());
}

#[test]
fn folds_never_train_on_their_target() {
    let c = small_cohort(5, 9);
    let cfg = ExperimentConfig {
        svm_include_anchors: true,
        ..quick_config(&Variant::ALL)
    };
    let report = evalharness::run_experiment(&c, &cfg).unwrap();
    for f in &report.folds {
        assert_eq!(
            f.audit.violations(&c, &f.couple),
            Vec::<String>::new(),
            "{}",
            f.id()
        );
    }
}
