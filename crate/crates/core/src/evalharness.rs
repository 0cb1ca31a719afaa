//! Leave-one-couple-out evaluation.
//!
//! Every couple is the target once. A fold splits the target's hours into
//! labelled anchors and unlabelled test hours, selects the closest non-target
//! samples, trains the requested variant, fits the SVM on the embedded
//! selection and scores the unlabelled hours. Folds are independent and run on
//! a bounded worker pool; the report is assembled after sorting, so it does not
//! depend on scheduling.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{self, Cohort, LabelledSet, Mode, SplitOutcome, TargetSplit};
use crate::downstream::{self, SvmConfig};
use crate::fewshot;
use crate::numcore::{self, adam_step, AdamState, NetworkParams, TapGrads};
use crate::rng;
use crate::siamese::{
    self, LossBreakdown, LossVariant, SiameseModel, TrainConfig, TrainInputs, Wiring,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    VanillaNn,
    Baseline1,
    Baseline2,
    Proposed,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::VanillaNn,
        Variant::Baseline1,
        Variant::Baseline2,
        Variant::Proposed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::VanillaNn => "vanilla-nn",
            Variant::Baseline1 => "baseline1",
            Variant::Baseline2 => "baseline2",
            Variant::Proposed => "proposed",
        }
    }

    /// Row label in the text table.
    pub fn table_label(self) -> &'static str {
        match self {
            Variant::VanillaNn => "Vanilla NN (pooled)",
            Variant::Baseline1 => "Baseline 1: C(V)",
            Variant::Baseline2 => "Baseline 2: C(V)+λD(V)",
            Variant::Proposed => "Proposed: C(V)+λD*_p(V)",
        }
    }

    pub fn loss(self) -> Option<LossVariant> {
        match self {
            Variant::VanillaNn => None,
            Variant::Baseline1 => Some(LossVariant::Baseline1),
            Variant::Baseline2 => Some(LossVariant::Baseline2),
            Variant::Proposed => Some(LossVariant::Proposed),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (vanilla-nn, baseline1, baseline2, proposed)"
                ))
            })
    }
}

/// Published F1 percentages (stress, no-stress, macro) of the original field
/// study, kept for side-by-side display. Synthetic runs are not expected to
/// match them.
pub const REFERENCE_TABLE: [(Mode, Variant, [f64; 3]); 6] = [
    (Mode::OneShot, Variant::Baseline1, [48.0, 52.2, 50.1]),
    (Mode::OneShot, Variant::Baseline2, [47.2, 55.3, 51.3]),
    (Mode::OneShot, Variant::Proposed, [50.3, 56.4, 53.3]),
    (Mode::FewShot, Variant::Baseline1, [48.8, 61.8, 55.3]),
    (Mode::FewShot, Variant::Baseline2, [49.4, 62.0, 55.7]),
    (Mode::FewShot, Variant::Proposed, [55.6, 65.7, 60.7]),
];

/// Pooled macro-F1 of the plain feed-forward network in the original study.
pub const REFERENCE_VANILLA_MACRO: f64 = 0.473;

pub fn reference(mode: Mode, variant: Variant) -> Option<[f64; 3]> {
    REFERENCE_TABLE
        .iter()
        .find(|(m, v, _)| *m == mode && *v == variant)
        .map(|(_, _, r)| *r)
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct F1Scores {
    pub stress: f64,
    pub nostress: f64,
    pub macro_f1: f64,
}

fn class_f1(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// One-vs-rest F1 for each class and their mean. A class that is neither
/// predicted nor present scores 0.
pub fn f1_scores(pred: &[u8], truth: &[u8]) -> Result<F1Scores> {
    if pred.len() != truth.len() {
        return Err(Error::Scoring(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Scoring("nothing to score".into()));
    }
    let stress = class_f1(pred, truth, 1);
    let nostress = class_f1(pred, truth, 0);
    Ok(F1Scores {
        stress,
        nostress,
        macro_f1: 0.5 * (stress + nostress),
    })
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VanillaConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for VanillaConfig {
    fn default() -> Self {
        VanillaConfig {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub modes: Vec<Mode>,
    pub variants: Vec<Variant>,
    pub selected_few_shot: usize,
    pub selected_one_shot: usize,
    pub epochs_few_shot: usize,
    pub epochs_one_shot: usize,
    /// Hidden widths between the input and the single output unit.
    pub hidden: Vec<usize>,
    pub wiring: Wiring,
    /// `epochs` and `variant` here are replaced per fold.
    pub train: TrainConfig,
    pub svm: SvmConfig,
    /// Also train the SVM on the target's labelled anchors.
    pub svm_include_anchors: bool,
    pub vanilla: VanillaConfig,
    pub seeds: Vec<u64>,
    pub parallel_folds: usize,
    /// Keep per-fold embeddings for plotting.
    pub keep_embeddings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            modes: vec![Mode::FewShot, Mode::OneShot],
            variants: vec![Variant::Baseline1, Variant::Baseline2, Variant::Proposed],
            selected_few_shot: 256,
            selected_one_shot: 128,
            epochs_few_shot: 10,
            epochs_one_shot: 3,
            hidden: vec![32, 16],
            wiring: Wiring::ScoreDifference,
            train: TrainConfig::default(),
            svm: SvmConfig::default(),
            svm_include_anchors: false,
            vanilla: VanillaConfig::default(),
            seeds: vec![0],
            parallel_folds: 4,
            keep_embeddings: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("at least one mode is required".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden widths must be non-empty and positive".into(),
            ));
        }
        if self.selected_few_shot == 0 || self.selected_one_shot == 0 {
            return Err(Error::Config("selection sizes must be positive".into()));
        }
        if self.epochs_few_shot == 0 || self.epochs_one_shot == 0 || self.vanilla.epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if self.vanilla.batch_size == 0 {
            return Err(Error::Config("vanilla.batch_size must be positive".into()));
        }
        if self.parallel_folds == 0 {
            return Err(Error::Config("parallel_folds must be positive".into()));
        }
        self.train.validate()
    }

    pub fn selected_size(&self, mode: Mode) -> usize {
        match mode {
            Mode::FewShot => self.selected_few_shot,
            Mode::OneShot => self.selected_one_shot,
        }
    }

    pub fn epochs(&self, mode: Mode) -> usize {
        match mode {
            Mode::FewShot => self.epochs_few_shot,
            Mode::OneShot => self.epochs_one_shot,
        }
    }

    pub fn topology(&self, input: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Folds

/// Cohort indices that entered each training-side structure of a fold.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FoldAudit {
    pub anchors: BTreeSet<usize>,
    pub unlabelled: BTreeSet<usize>,
    pub selected: BTreeSet<usize>,
    pub pair_left: BTreeSet<usize>,
    pub pair_right: BTreeSet<usize>,
    pub rate_samples: BTreeSet<usize>,
    pub svm_train: BTreeSet<usize>,
    pub vanilla_train: BTreeSet<usize>,
}

impl FoldAudit {
    /// Leakage findings: target samples outside the anchor set reaching any
    /// training structure, or anchors reaching structures that must be
    /// non-target only.
    pub fn violations(&self, cohort: &Cohort, target: &str) -> Vec<String> {
        let is_target = |i: &usize| cohort.sample(*i).couple_id == target;
        let mut out = Vec::new();
        let mut forbid_target = |name: &str, set: &BTreeSet<usize>| {
            let n = set.iter().filter(|i| is_target(i)).count();
            if n > 0 {
                out.push(format!("{name}: {n} target-couple sample(s)"));
            }
        };
        forbid_target("selected", &self.selected);
        forbid_target("pair_left", &self.pair_left);
        forbid_target("vanilla_train", &self.vanilla_train);
        let svm_target: BTreeSet<usize> = self
            .svm_train
            .iter()
            .copied()
            .filter(|i| is_target(i))
            .collect();
        if !svm_target.is_subset(&self.anchors) {
            out.push("svm_train: target samples beyond the labelled anchors".into());
        }
        if !self.pair_right.is_subset(&self.anchors) {
            out.push("pair_right: rows outside the labelled anchors".into());
        }
        let allowed: BTreeSet<usize> = self.anchors.union(&self.selected).copied().collect();
        if !self.rate_samples.is_subset(&allowed) {
            out.push("rate_samples: rows outside anchors ∪ selected".into());
        }
        for (name, set) in [
            ("selected", &self.selected),
            ("pair_left", &self.pair_left),
            ("pair_right", &self.pair_right),
            ("rate_samples", &self.rate_samples),
            ("svm_train", &self.svm_train),
            ("vanilla_train", &self.vanilla_train),
        ] {
            let n = set.intersection(&self.unlabelled).count();
            if n > 0 {
                out.push(format!("{name}: {n} unlabelled target sample(s)"));
            }
        }
        out
    }
}

/// Embedded points of one fold, grouped for inspection plots.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldEmbeddings {
    pub sample_ids: Vec<String>,
    pub groups: Vec<&'static str>,
    pub embeddings: Array2<f64>,
}

pub const GROUP_NAMES: [&str; 4] = [
    "nontarget-stress",
    "nontarget-nostress",
    "target-stress",
    "target-nostress",
];

fn group_name(target: bool, label: u8) -> &'static str {
    match (target, label) {
        (false, 1) => GROUP_NAMES[0],
        (false, _) => GROUP_NAMES[1],
        (true, 1) => GROUP_NAMES[2],
        (true, _) => GROUP_NAMES[3],
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub mode: Mode,
    pub variant: Variant,
    pub couple: String,
    pub seed: u64,
    pub n_anchors: usize,
    pub n_selected: usize,
    pub predictions: Vec<u8>,
    pub truth: Vec<u8>,
    pub scores: F1Scores,
    pub log: Vec<LossBreakdown>,
    pub audit: FoldAudit,
    pub embeddings: Option<FoldEmbeddings>,
}

impl FoldResult {
    pub fn id(&self) -> String {
        fold_id(self.mode, self.variant, &self.couple, self.seed)
    }
}

pub fn fold_id(mode: Mode, variant: Variant, couple: &str, seed: u64) -> String {
    format!("{mode}_{variant}_{couple}_s{seed}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSkip {
    pub mode: Mode,
    pub variant: Variant,
    pub couple: String,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub enum FoldOutcome {
    Done(Box<FoldResult>),
    Skipped(FoldSkip),
}

/// Plain feed-forward classifier trained with binary cross-entropy.
pub fn train_vanilla(
    data: &LabelledSet,
    topology: &[usize],
    cfg: &VanillaConfig,
    seed: u64,
) -> Result<NetworkParams> {
    let mut params =
        numcore::init_params(rng::derive_key(seed, &[rng::tag("vanilla.init")]), topology)?;
    let mut adam = AdamState::with_lr(&params, cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(
            seed,
            &[rng::tag("vanilla.shuffle"), epoch as u64],
        ));
        for rows in order.chunks(cfg.batch_size) {
            let x = data.features.select(Axis(0), rows);
            let trace = params.forward(x.view())?;
            let n = rows.len() as f64;
            let out = trace.output();
            let mut g = Array2::<f64>::zeros(out.raw_dim());
            for (k, &r) in rows.iter().enumerate() {
                let p = out[[k, 0]].clamp(siamese::CLAMP, 1.0 - siamese::CLAMP);
                let y = f64::from(data.labels[r]);
                g[[k, 0]] = (p - y) / (p * (1.0 - p) * n);
            }
            let grads = params.backward(&trace, &TapGrads::new().at(trace.depth(), g))?;
            adam_step(&mut params, &grads, &mut adam).map_err(|e| Error::Training {
                fold: "vanilla-nn".into(),
                epoch,
                message: e.to_string(),
            })?;
        }
    }
    Ok(params)
}

fn embeddings_for(
    cohort: &Cohort,
    split: &TargetSplit,
    selected: &LabelledSet,
    embed: impl Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
) -> Result<FoldEmbeddings> {
    let mut ids = Vec::new();
    let mut groups = Vec::new();
    let mut parts = Vec::new();
    let id = |i: usize| {
        let s = cohort.sample(i);
        format!("{}@{}", s.participant_id, s.hour_index)
    };
    for (k, &i) in selected.origin.iter().enumerate() {
        ids.push(id(i));
        groups.push(group_name(false, selected.labels[k]));
    }
    parts.push(embed(selected.features.view())?);
    for (k, &i) in split.labelled.origin.iter().enumerate() {
        ids.push(id(i));
        groups.push(group_name(true, split.labelled.labels[k]));
    }
    parts.push(embed(split.labelled.features.view())?);
    for (k, &i) in split.unlabelled_origin.iter().enumerate() {
        ids.push(id(i));
        groups.push(group_name(true, split.withheld[k]));
    }
    parts.push(embed(split.unlabelled.view())?);
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let embeddings =
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FoldEmbeddings {
        sample_ids: ids,
        groups,
        embeddings,
    })
}

/// Runs one (mode, variant, target couple, seed) fold.
pub fn run_fold(
    cohort: &Cohort,
    target: &str,
    mode: Mode,
    variant: Variant,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<FoldOutcome> {
    let skip = |reason: String| {
        Ok(FoldOutcome::Skipped(FoldSkip {
            mode,
            variant,
            couple: target.to_owned(),
            seed,
            reason,
        }))
    };
    let split = match cohort::split_target(cohort, target, mode)? {
        SplitOutcome::Ready(s) => s,
        SplitOutcome::Skipped(reason) => return skip(reason),
    };
    if split.pool.is_empty() {
        return skip("no non-target samples".into());
    }
    let fold_seed = rng::derive_key(seed, &[rng::tag(target), rng::tag(mode.as_str())]);
    let topology = cfg.topology(cohort.dim());
    let selected = fewshot::select_closest(&split.pool, &split.labelled, cfg.selected_size(mode))?;
    let mut audit = FoldAudit {
        anchors: split.labelled.origin.iter().copied().collect(),
        unlabelled: split.unlabelled_origin.iter().copied().collect(),
        selected: selected.set.origin.iter().copied().collect(),
        ..Default::default()
    };

    let mut svm_set = selected.set.clone();
    if cfg.svm_include_anchors {
        svm_set = svm_set.concat(&split.labelled)?;
    }

    let (predictions, log, embeddings) = match variant.loss() {
        None => {
            let params = train_vanilla(&split.pool, &topology, &cfg.vanilla, fold_seed)?;
            audit.vanilla_train = split.pool.origin.iter().copied().collect();
            let out = params.forward(split.unlabelled.view())?;
            let pred = out
                .output()
                .column(0)
                .iter()
                .map(|&p| u8::from(p > 0.5))
                .collect();
            let emb = if cfg.keep_embeddings {
                Some(embeddings_for(cohort, &split, &selected.set, |x| {
                    Ok(params.forward(x)?.penultimate().clone())
                })?)
            } else {
                None
            };
            (pred, Vec::new(), emb)
        }
        Some(loss) => {
            if svm_set.class_count(1) == 0 || svm_set.class_count(0) == 0 {
                return skip("selected pool lacks one class".into());
            }
            let model = SiameseModel::new(
                rng::derive_key(fold_seed, &[rng::tag("snn.init")]),
                &topology,
                cfg.wiring,
            )?;
            let train_cfg = TrainConfig {
                epochs: cfg.epochs(mode),
                variant: loss,
                seed: fold_seed,
                ..cfg.train.clone()
            };
            let inputs = TrainInputs {
                selected: &selected,
                anchors: &split.labelled,
                unlabelled: split.unlabelled.view(),
            };
            let fold_name = fold_id(mode, variant, target, seed);
            let outcome = siamese::train_snn(model, &inputs, &train_cfg, &fold_name, false)?;
            audit.pair_left = audit.selected.clone();
            audit.pair_right = audit.anchors.clone();
            audit.rate_samples = outcome.rate_sample_origins.iter().copied().collect();
            let model = outcome.model;
            let train_emb = model.embed(svm_set.features.view())?;
            let svm = downstream::svm_train(train_emb.view(), &svm_set.labels, &cfg.svm).map_err(
                |e| match e {
                    Error::Training { message, .. } => Error::Training {
                        fold: fold_name.clone(),
                        epoch: 0,
                        message,
                    },
                    other => other,
                },
            )?;
            let test_emb = model.embed(split.unlabelled.view())?;
            let pred = downstream::svm_predict(&svm, test_emb.view())?;
            let emb = if cfg.keep_embeddings {
                Some(embeddings_for(cohort, &split, &selected.set, |x| {
                    model.embed(x)
                })?)
            } else {
                None
            };
            (pred, outcome.log, emb)
        }
    };
    if variant != Variant::VanillaNn {
        audit.svm_train = svm_set.origin.iter().copied().collect();
    }
    let scores = f1_scores(&predictions, &split.withheld)?;
    Ok(FoldOutcome::Done(Box::new(FoldResult {
        mode,
        variant,
        couple: target.to_owned(),
        seed,
        n_anchors: split.labelled.len(),
        n_selected: selected.len(),
        predictions,
        truth: split.withheld,
        scores,
        log,
        audit,
        embeddings,
    })))
}

// ---------------------------------------------------------------------------
// Experiments and reports

/// Scores of one (mode, variant, seed) over all its folds.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRow {
    pub mode: Mode,
    pub variant: Variant,
    pub seed: u64,
    pub folds: usize,
    /// F1 of the concatenated predictions of all folds.
    pub pooled: F1Scores,
    /// Mean of the per-fold F1 values.
    pub fold_mean: F1Scores,
}

/// Mean and standard deviation over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mode: Mode,
    pub variant: Variant,
    pub seeds: usize,
    pub mean: F1Scores,
    pub std: F1Scores,
    pub fold_mean_macro: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub folds: Vec<FoldResult>,
    pub skipped: Vec<FoldSkip>,
    pub pooled: Vec<PooledRow>,
    pub summary: Vec<SummaryRow>,
}

pub fn run_experiment(cohort: &Cohort, cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(Error::Experiment("cohort is empty".into()));
    }
    let mut jobs = Vec::new();
    for &mode in &cfg.modes {
        for &variant in &cfg.variants {
            for couple in cohort.couple_ids() {
                for &seed in &cfg.seeds {
                    jobs.push((mode, variant, couple.to_owned(), seed));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel_folds)
        .build()
        .map_err(|e| Error::Experiment(e.to_string()))?;
    let outcomes: Vec<Result<FoldOutcome>> = pool.install(|| {
        jobs.par_iter()
            .map(|(mode, variant, couple, seed)| {
                run_fold(cohort, couple, *mode, *variant, cfg, *seed)
            })
            .collect()
    });
    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o? {
            FoldOutcome::Done(r) => folds.push(*r),
            FoldOutcome::Skipped(s) => skipped.push(s),
        }
    }
    if folds.is_empty() {
        return Err(Error::Experiment(format!(
            "all {} folds were skipped",
            skipped.len()
        )));
    }
    MetricsReport::from_folds(folds, skipped)
}

fn pool_rows(folds: &[FoldResult]) -> Result<Vec<PooledRow>> {
    let mut keys: Vec<(Mode, Variant, u64)> =
        folds.iter().map(|f| (f.mode, f.variant, f.seed)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(mode, variant, seed)| {
            let members: Vec<&FoldResult> = folds
                .iter()
                .filter(|f| f.mode == mode && f.variant == variant && f.seed == seed)
                .collect();
            let pred: Vec<u8> = members
                .iter()
                .flat_map(|f| f.predictions.iter().copied())
                .collect();
            let truth: Vec<u8> = members
                .iter()
                .flat_map(|f| f.truth.iter().copied())
                .collect();
            let k = members.len() as f64;
            let mean =
                |get: fn(&F1Scores) -> f64| members.iter().map(|f| get(&f.scores)).sum::<f64>() / k;
            Ok(PooledRow {
                mode,
                variant,
                seed,
                folds: members.len(),
                pooled: f1_scores(&pred, &truth)?,
                fold_mean: F1Scores {
                    stress: mean(|s| s.stress),
                    nostress: mean(|s| s.nostress),
                    macro_f1: mean(|s| s.macro_f1),
                },
            })
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn summarize(pooled: &[PooledRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Mode, Variant)> = pooled.iter().map(|p| (p.mode, p.variant)).collect();
    keys.dedup();
    keys.into_iter()
        .map(|(mode, variant)| {
            let rows: Vec<&PooledRow> = pooled
                .iter()
                .filter(|p| p.mode == mode && p.variant == variant)
                .collect();
            let col = |get: fn(&PooledRow) -> f64| {
                mean_std(&rows.iter().map(|r| get(r)).collect::<Vec<_>>())
            };
            let (s_m, s_s) = col(|r| r.pooled.stress);
            let (n_m, n_s) = col(|r| r.pooled.nostress);
            let (m_m, m_s) = col(|r| r.pooled.macro_f1);
            let (fm, _) = col(|r| r.fold_mean.macro_f1);
            SummaryRow {
                mode,
                variant,
                seeds: rows.len(),
                mean: F1Scores {
                    stress: s_m,
                    nostress: n_m,
                    macro_f1: m_m,
                },
                std: F1Scores {
                    stress: s_s,
                    nostress: n_s,
                    macro_f1: m_s,
                },
                fold_mean_macro: fm,
            }
        })
        .collect()
}

impl MetricsReport {
    /// Sorts fold rows by (mode, variant, couple, seed) and aggregates them.
    pub fn from_folds(mut folds: Vec<FoldResult>, mut skipped: Vec<FoldSkip>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Experiment(format!(
                "all {} folds were skipped",
                skipped.len()
            )));
        }
        folds.sort_by(|a, b| {
            (a.mode, a.variant, &a.couple, a.seed).cmp(&(b.mode, b.variant, &b.couple, b.seed))
        });
        skipped.sort_by(|a, b| {
            (a.mode, a.variant, &a.couple, a.seed).cmp(&(b.mode, b.variant, &b.couple, b.seed))
        });
        let pooled = pool_rows(&folds)?;
        let summary = summarize(&pooled);
        Ok(MetricsReport {
            folds,
            skipped,
            pooled,
            summary,
        })
    }

    pub const FOLDS_HEADER: &'static str =
        "mode,variant,couple,seed,n_anchors,n_selected,n_test,f1_stress,f1_nostress,f1_macro";
    pub const SUMMARY_HEADER: &'static str =
        "mode,variant,seeds,stress_mean,stress_std,nostress_mean,nostress_std,macro_mean,macro_std,fold_macro_mean";

    pub fn folds_csv(&self) -> String {
        let mut out = String::from(Self::FOLDS_HEADER);
        out.push('\n');
        for f in &self.folds {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
                f.mode,
                f.variant,
                f.couple,
                f.seed,
                f.n_anchors,
                f.n_selected,
                f.truth.len(),
                f.scores.stress,
                f.scores.nostress,
                f.scores.macro_f1
            );
        }
        out
    }

    pub fn pooled_csv(&self) -> String {
        let mut out = String::from(
            "mode,variant,seed,folds,pooled_stress,pooled_nostress,pooled_macro,fold_mean_macro\n",
        );
        for p in &self.pooled {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                p.mode,
                p.variant,
                p.seed,
                p.folds,
                p.pooled.stress,
                p.pooled.nostress,
                p.pooled.macro_f1,
                p.fold_mean.macro_f1
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(Self::SUMMARY_HEADER);
        out.push('\n');
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                s.mode,
                s.variant,
                s.seeds,
                s.mean.stress,
                s.std.stress,
                s.mean.nostress,
                s.std.nostress,
                s.mean.macro_f1,
                s.std.macro_f1,
                s.fold_mean_macro
            );
        }
        out
    }

    pub fn skipped_csv(&self) -> String {
        let mut out = String::from("mode,variant,couple,seed,reason\n");
        for s in &self.skipped {
            let _ = writeln!(
                out,
                "{},{},{},{},\"{}\"",
                s.mode,
                s.variant,
                s.couple,
                s.seed,
                s.reason.replace('"', "'")
            );
        }
        out
    }

    pub fn training_log_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push('\n');
        for f in &self.folds {
            if let Some(loss) = f.variant.loss() {
                for row in &f.log {
                    out.push_str(&row.csv_row(&f.id(), loss));
                    out.push('\n');
                }
            }
        }
        out
    }

    /// Pooled F1 percentages laid out like the published comparison table,
    /// with mean ± std over seeds and the published macro value alongside.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<9} {:<26} {:>14} {:>14} {:>14} {:>9}",
            "Mode", "Method & Loss Function", "Stress", "No-stress", "Macro", "Ref macro"
        );
        let _ = writeln!(out, "{}", "-".repeat(91));
        let mut last_mode = None;
        for mode in [Mode::OneShot, Mode::FewShot] {
            for s in self.summary.iter().filter(|s| s.mode == mode) {
                let cell = |m: f64, sd: f64| {
                    if s.seeds > 1 {
                        format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd)
                    } else {
                        format!("{:.1}", 100.0 * m)
                    }
                };
                let label = if last_mode == Some(mode) {
                    ""
                } else {
                    mode.as_str()
                };
                last_mode = Some(mode);
                let refm = match (s.variant, reference(mode, s.variant)) {
                    (_, Some(r)) => format!("{:.1}", r[2]),
                    (Variant::VanillaNn, None) => format!("{:.1}", 100.0 * REFERENCE_VANILLA_MACRO),
                    _ => String::from("-"),
                };
                let _ = writeln!(
                    out,
                    "{:<9} {:<26} {:>14} {:>14} {:>14} {:>9}",
                    label,
                    s.variant.table_label(),
                    cell(s.mean.stress, s.std.stress),
                    cell(s.mean.nostress, s.std.nostress),
                    cell(s.mean.macro_f1, s.std.macro_f1),
                    refm
                );
            }
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "\n{} fold(s) skipped", self.skipped.len());
        }
        out
    }

    pub fn summary_for(&self, mode: Mode, variant: Variant) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.mode == mode && s.variant == variant)
    }

    pub fn pooled_for(&self, mode: Mode, variant: Variant) -> Vec<&PooledRow> {
        self.pooled
            .iter()
            .filter(|p| p.mode == mode && p.variant == variant)
            .collect()
    }
}
