//! Siamese model and its training objective.
//!
//! Both branches share one [`NetworkParams`]. The pair distance is the
//! absolute difference of the two logistic scores, and the contrastive
//! cross-entropy drives same-class pairs towards 0 and mixed pairs towards 1.
//! The domain penalty is the Sinkhorn transport cost between the 16-wide
//! penultimate embeddings of a labelled comparison set and of the target's
//! unlabelled hours. The proposed objective evaluates that penalty at several
//! hypothesised stress base rates and minimises only the smallest:
//!
//! ```text
//! total = C + λ · min_p D_p
//! ```

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::LabelledSet;
use crate::fewshot::{self, PairBatch, RateSample, SelectedPool};
use crate::numcore::{self, adam_step, AdamState, GradientSet, NetworkParams, TapGrads};
use crate::otcore::{self, SinkhornConfig, TransportPlan};
use crate::rng;
use crate::{Error, Result};

/// Distances are clamped into `[CLAMP, 1 − CLAMP]` before taking logarithms.
pub const CLAMP: f64 = 1e-7;

pub const DEFAULT_RATES: [f64; 3] = [0.05, 0.5, 0.95];
pub const DEFAULT_LAMBDA: f64 = 0.15;

/// How the two branches are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Wiring {
    /// `|σ(score(xᵢ)) − σ(score(xⱼ))|`, each branch running the full network.
    #[default]
    ScoreDifference,
    /// `σ(w · |hᵢ − hⱼ| + b)` with the output layer applied to the embedding gap.
    EmbeddingDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel {
    pub params: NetworkParams,
    pub wiring: Wiring,
}

impl SiameseModel {
    pub fn new(seed: u64, topology: &[usize], wiring: Wiring) -> Result<Self> {
        let params = numcore::init_params(seed, topology)?;
        if params.layers.len() < 2 {
            return Err(Error::Config(
                "a Siamese model needs at least one hidden layer".into(),
            ));
        }
        Ok(SiameseModel { params, wiring })
    }

    pub fn embedding_width(&self) -> usize {
        self.params.embedding_width()
    }

    /// Penultimate-layer activations.
    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.params.forward(x)?.penultimate().clone())
    }

    pub fn pair_distance(&self, xi: ArrayView1<'_, f64>, xj: ArrayView1<'_, f64>) -> Result<f64> {
        let batch = ndarray::stack(Axis(0), &[xi, xj]).map_err(|e| Error::Shape(e.to_string()))?;
        let trace = self.params.forward(batch.view())?;
        Ok(match self.wiring {
            Wiring::ScoreDifference => {
                let out = trace.output();
                (out[[0, 0]] - out[[1, 0]]).abs()
            }
            Wiring::EmbeddingDifference => {
                let h = trace.penultimate();
                let head = self.params.layers.last().expect("has layers");
                let gap = (&h.row(0) - &h.row(1)).mapv(f64::abs);
                numcore::logistic(head.weight.row(0).dot(&gap) + head.bias[0])
            }
        })
    }
}

/// Features gathered for a run of pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
    pub similarity: Vec<u8>,
}

impl PairData {
    pub fn gather(batch: &PairBatch, selected: &LabelledSet, anchors: &LabelledSet) -> Self {
        let li: Vec<usize> = batch.pairs.iter().map(|p| p.selected).collect();
        let ri: Vec<usize> = batch.pairs.iter().map(|p| p.anchor).collect();
        PairData {
            left: selected.features.select(Axis(0), &li),
            right: anchors.features.select(Axis(0), &ri),
            similarity: batch.pairs.iter().map(|p| p.similarity).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.similarity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.similarity.is_empty()
    }

    pub fn rows(&self, rows: &[usize]) -> PairData {
        PairData {
            left: self.left.select(Axis(0), rows),
            right: self.right.select(Axis(0), rows),
            similarity: rows.iter().map(|&r| self.similarity[r]).collect(),
        }
    }
}

/// Per-pair loss and its derivative with respect to the (unclamped) distance.
fn pair_term(d: f64, similarity: u8, n: f64) -> (f64, f64) {
    let dc = d.clamp(CLAMP, 1.0 - CLAMP);
    let live = d > CLAMP && d < 1.0 - CLAMP;
    if similarity == 1 {
        (-dc.ln() / n, if live { -1.0 / (n * dc) } else { 0.0 })
    } else {
        (
            -(1.0 - dc).ln() / n,
            if live { 1.0 / (n * (1.0 - dc)) } else { 0.0 },
        )
    }
}

/// Contrastive cross-entropy averaged over the pairs, with exact gradients
/// through both branches.
pub fn contrastive_loss(model: &SiameseModel, pairs: &PairData) -> Result<(f64, GradientSet)> {
    let n = pairs.len();
    if n == 0 {
        return Err(Error::Config(
            "contrastive loss needs at least one pair".into(),
        ));
    }
    let stacked = concatenate(Axis(0), &[pairs.left.view(), pairs.right.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let trace = model.params.forward(stacked.view())?;
    let nf = n as f64;
    let mut loss = 0.0;
    match model.wiring {
        Wiring::ScoreDifference => {
            let out = trace.output();
            let mut g_out = Array2::<f64>::zeros((2 * n, 1));
            for k in 0..n {
                let diff = out[[k, 0]] - out[[n + k, 0]];
                let (l, dl) = pair_term(diff.abs(), pairs.similarity[k], nf);
                loss += l;
                let g = dl * sign(diff);
                g_out[[k, 0]] = g;
                g_out[[n + k, 0]] = -g;
            }
            let grads = model
                .params
                .backward(&trace, &TapGrads::new().at(trace.depth(), g_out))?;
            Ok((loss, grads))
        }
        Wiring::EmbeddingDifference => {
            let h = trace.penultimate();
            let head = model.params.layers.last().expect("has layers");
            let w = head.weight.row(0);
            let width = h.ncols();
            let mut g_h = Array2::<f64>::zeros((2 * n, width));
            let mut g_w = Array1::<f64>::zeros(width);
            let mut g_b = 0.0;
            for k in 0..n {
                let diff = &h.row(k) - &h.row(n + k);
                let gap = diff.mapv(f64::abs);
                let d = numcore::logistic(w.dot(&gap) + head.bias[0]);
                let (l, dl) = pair_term(d, pairs.similarity[k], nf);
                loss += l;
                let dz = dl * d * (1.0 - d);
                g_w.scaled_add(dz, &gap);
                g_b += dz;
                for c in 0..width {
                    let g = dz * w[c] * sign(diff[c]);
                    g_h[[k, c]] = g;
                    g_h[[n + k, c]] = -g;
                }
            }
            let mut grads = model
                .params
                .backward(&trace, &TapGrads::new().at(trace.depth() - 1, g_h))?;
            let last = grads.layers.last_mut().expect("has layers");
            last.0.row_mut(0).assign(&g_w);
            last.1[0] = g_b;
            Ok((loss, grads))
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Outcome of one domain-penalty evaluation.
#[derive(Debug, Clone)]
pub struct Penalty {
    pub distance: f64,
    pub grads: GradientSet,
    pub plan: TransportPlan,
}

/// Options for the domain penalty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub sinkhorn: SinkhornConfig,
    /// Divide the transport cost by `N_b` once more (off by default: the plan
    /// already carries uniform `1/N_b` marginals).
    pub literal_nb_scaling: bool,
}

fn stack_embeddings(
    model: &SiameseModel,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
) -> Result<numcore::ForwardTrace> {
    let stacked = concatenate(Axis(0), &[a, b]).map_err(|e| Error::Shape(e.to_string()))?;
    model.params.forward(stacked.view())
}

/// Transport cost under a fixed plan, and its parameter gradient.
pub fn fixed_plan_penalty(
    model: &SiameseModel,
    source: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    plan: &TransportPlan,
) -> Result<(f64, GradientSet)> {
    let m = source.nrows();
    let trace = stack_embeddings(model, source, target)?;
    let emb = trace.penultimate();
    let (ea, eb) = (emb.slice(s![..m, ..]), emb.slice(s![m.., ..]));
    let cost = otcore::cost_matrix(ea, eb)?;
    let distance = plan.transport_cost(&cost);
    let (ga, gb) = otcore::sinkhorn_embedding_grads(ea, eb, plan)?;
    let tap =
        concatenate(Axis(0), &[ga.view(), gb.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let grads = model
        .params
        .backward(&trace, &TapGrads::new().at(trace.depth() - 1, tap))?;
    Ok((distance, grads))
}

/// Sinkhorn distance between the embedded comparison set and `X_b`, with
/// fixed-plan gradients back-propagated through the embedding.
pub fn wasserstein_penalty(
    model: &SiameseModel,
    comparison: ArrayView2<'_, f64>,
    unlabelled: ArrayView2<'_, f64>,
    cfg: &PenaltyConfig,
) -> Result<Penalty> {
    if comparison.nrows() == 0 || unlabelled.nrows() == 0 {
        return Err(Error::Shape(
            "domain penalty needs non-empty point sets".into(),
        ));
    }
    let m = comparison.nrows();
    let trace = stack_embeddings(model, comparison, unlabelled)?;
    let emb = trace.penultimate();
    let (ea, eb) = (emb.slice(s![..m, ..]), emb.slice(s![m.., ..]));
    let (mut distance, plan) = otcore::sinkhorn(ea, eb, &cfg.sinkhorn)?;
    let (mut ga, mut gb) = otcore::sinkhorn_embedding_grads(ea, eb, &plan)?;
    if cfg.literal_nb_scaling {
        let scale = 1.0 / unlabelled.nrows() as f64;
        distance *= scale;
        ga *= scale;
        gb *= scale;
    }
    let tap =
        concatenate(Axis(0), &[ga.view(), gb.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let grads = model
        .params
        .backward(&trace, &TapGrads::new().at(trace.depth() - 1, tap))?;
    Ok(Penalty {
        distance,
        grads,
        plan,
    })
}

/// Result of searching the hypothesised base rates.
#[derive(Debug, Clone)]
pub struct RateChoice {
    pub rate: f64,
    pub distance: f64,
    pub sample: RateSample,
    /// `(rate, D_p)` for every configured rate, in configuration order.
    pub per_rate: Vec<(f64, f64)>,
    pub penalty: Penalty,
}

/// Evaluates `D_p` for each rate and keeps the smallest; ties go to the rate
/// nearest 0.5.
pub fn base_rate_min(
    model: &SiameseModel,
    labelled: &LabelledSet,
    unlabelled: ArrayView2<'_, f64>,
    rates: &[f64],
    rng: &mut impl Rng,
    cfg: &PenaltyConfig,
) -> Result<RateChoice> {
    if rates.is_empty() {
        return Err(Error::Config("no base rates configured".into()));
    }
    let m = unlabelled.nrows();
    let mut best: Option<(usize, RateSample, Penalty)> = None;
    let mut per_rate = Vec::with_capacity(rates.len());
    for (k, &p) in rates.iter().enumerate() {
        let sample = fewshot::resample_base_rate(labelled, p, m, rng)?;
        let penalty = wasserstein_penalty(model, sample.set.features.view(), unlabelled, cfg)?;
        per_rate.push((p, penalty.distance));
        let better = match &best {
            None => true,
            Some((b, _, bp)) => {
                penalty.distance < bp.distance
                    || (penalty.distance == bp.distance
                        && (p - 0.5).abs() < (rates[*b] - 0.5).abs())
            }
        };
        if better {
            best = Some((k, sample, penalty));
        }
    }
    let (k, sample, penalty) = best.expect("rates non-empty");
    Ok(RateChoice {
        rate: rates[k],
        distance: penalty.distance,
        sample,
        per_rate,
        penalty,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// Contrastive loss only.
    Baseline1,
    /// Contrastive loss plus the penalty at the labelled pool's own stress rate.
    Baseline2,
    /// Contrastive loss plus the penalty at the best-matching hypothesised rate.
    Proposed,
}

impl LossVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::Baseline1 => "baseline1",
            LossVariant::Baseline2 => "baseline2",
            LossVariant::Proposed => "proposed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Set per fold by the evaluation driver; not part of the config file.
    #[serde(skip)]
    pub epochs: usize,
    pub rates: Vec<f64>,
    pub lambda: f64,
    pub lr: f64,
    /// Pairs per Adam step; 0 takes one full-batch step per epoch.
    pub batch_pairs: usize,
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub variant: LossVariant,
    pub penalty: PenaltyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            rates: DEFAULT_RATES.to_vec(),
            lambda: DEFAULT_LAMBDA,
            lr: 1e-3,
            batch_pairs: 32,
            seed: 0,
            variant: LossVariant::Proposed,
            penalty: PenaltyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.rates.is_empty() || self.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!(
                "base rates must be non-empty and within [0, 1]: {:?}",
                self.rates
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(
                "lambda must be finite and non-negative".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        self.penalty.sinkhorn.validate()
    }
}

/// Per-epoch loss values. With several steps per epoch each field is the mean
/// over steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub contrastive: f64,
    /// `(rate, D_p)`; empty for the contrastive-only variant.
    pub wasserstein: Vec<(f64, f64)>,
    pub selected_rate: Option<f64>,
    pub d_star: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "fold,epoch,variant,lambda,contrastive,d_per_rate,p_star,d_star,total";

    pub fn csv_row(&self, fold: &str, variant: LossVariant) -> String {
        let rates = self
            .wasserstein
            .iter()
            .map(|(p, d)| format!("{p}:{d:.9}"))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{fold},{},{},{},{:.9},{rates},{},{:.9},{:.9}",
            self.epoch,
            variant.as_str(),
            self.lambda,
            self.contrastive,
            self.selected_rate.map_or(String::new(), |p| p.to_string()),
            self.d_star,
            self.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SiameseModel,
    pub log: Vec<LossBreakdown>,
    /// Parameters after every optimizer step.
    pub trajectory: Option<Vec<Vec<f64>>>,
    /// Cohort indices of every row that entered a rate sample.
    pub rate_sample_origins: Vec<usize>,
}

/// Inputs of one training run.
pub struct TrainInputs<'a> {
    pub selected: &'a SelectedPool,
    pub anchors: &'a LabelledSet,
    pub unlabelled: ArrayView2<'a, f64>,
}

/// Trains the model on one fold. Pairs and rate samples are redrawn every
/// epoch from streams keyed by `cfg.seed`, so a run is reproducible.
pub fn train_snn(
    mut model: SiameseModel,
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
    fold: &str,
    record_trajectory: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_err = |epoch: usize, message: String| Error::Training {
        fold: fold.to_owned(),
        epoch,
        message,
    };
    let labelled = inputs.anchors.concat(&inputs.selected.set)?;
    let empirical_rate = labelled.class_count(fewshot::STRESSED) as f64 / labelled.len() as f64;
    let mut adam = AdamState::with_lr(&model.params, cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut trajectory = record_trajectory.then(Vec::new);
    let mut rate_sample_origins = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut pair_rng = rng::stream(cfg.seed, &[rng::tag("pairs"), epoch as u64]);
        let batch = fewshot::make_pairs(inputs.selected, inputs.anchors, &mut pair_rng)?;
        let data = PairData::gather(&batch, &inputs.selected.set, inputs.anchors);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let chunk = match cfg.batch_pairs {
            0 => data.len(),
            b => {
                order.shuffle(&mut pair_rng);
                b
            }
        };

        let mut sum_c = 0.0;
        let mut sum_d = 0.0;
        let mut sum_rates: Vec<(f64, f64)> = Vec::new();
        let mut last_rate = None;
        let mut steps = 0usize;
        for (step, rows) in order.chunks(chunk).enumerate() {
            let part = data.rows(rows);
            let (c, mut grads) = contrastive_loss(&model, &part)?;
            if !c.is_finite() {
                return Err(train_err(epoch, format!("contrastive loss is {c}")));
            }
            sum_c += c;
            if cfg.variant != LossVariant::Baseline1 {
                let mut rate_rng =
                    rng::stream(cfg.seed, &[rng::tag("rates"), epoch as u64, step as u64]);
                let (rate, d, per_rate, g, origins) = match cfg.variant {
                    LossVariant::Proposed => {
                        let choice = base_rate_min(
                            &model,
                            &labelled,
                            inputs.unlabelled,
                            &cfg.rates,
                            &mut rate_rng,
                            &cfg.penalty,
                        )?;
                        (
                            choice.rate,
                            choice.distance,
                            choice.per_rate,
                            choice.penalty.grads,
                            choice.sample.set.origin,
                        )
                    }
                    _ => {
                        let sample = fewshot::resample_base_rate(
                            &labelled,
                            empirical_rate,
                            inputs.unlabelled.nrows(),
                            &mut rate_rng,
                        )?;
                        let pen = wasserstein_penalty(
                            &model,
                            sample.set.features.view(),
                            inputs.unlabelled,
                            &cfg.penalty,
                        )?;
                        (
                            empirical_rate,
                            pen.distance,
                            vec![(empirical_rate, pen.distance)],
                            pen.grads,
                            sample.set.origin,
                        )
                    }
                };
                if !d.is_finite() {
                    return Err(train_err(epoch, format!("domain penalty is {d}")));
                }
                rate_sample_origins.extend(origins);
                grads.add_scaled(&g, cfg.lambda);
                sum_d += d;
                if sum_rates.is_empty() {
                    sum_rates = per_rate;
                } else {
                    for (acc, (_, v)) in sum_rates.iter_mut().zip(per_rate) {
                        acc.1 += v;
                    }
                }
                last_rate = Some(rate);
            }
            adam_step(&mut model.params, &grads, &mut adam)
                .map_err(|e| train_err(epoch, e.to_string()))?;
            if let Some(t) = trajectory.as_mut() {
                t.push(model.params.flatten());
            }
            steps += 1;
        }
        let k = steps as f64;
        let contrastive = sum_c / k;
        let d_star = sum_d / k;
        log.push(LossBreakdown {
            epoch,
            contrastive,
            wasserstein: sum_rates.into_iter().map(|(p, v)| (p, v / k)).collect(),
            selected_rate: last_rate,
            d_star,
            lambda: cfg.lambda,
            total: contrastive + cfg.lambda * d_star,
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        trajectory,
        rate_sample_origins,
    })
}
