//! Samples, cohorts, CSV ingestion, the synthetic cohort generator and the
//! per-fold target split.
//!
//! A sample is one participant-hour. Cross-validation folds, splits and base
//! rates all operate per couple; `participant_id` is carried for ordering and
//! provenance only.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

/// Fixed leading columns of the CSV schema; features `f0..f{d-1}` follow.
pub const CSV_FIXED_COLUMNS: [&str; 5] = [
    "couple_id",
    "participant_id",
    "hour_index",
    "stress_raw",
    "label",
];

/// Share of a couple's hours that count as "early" for few-shot labelling and
/// for the eligibility filter.
pub const EARLY_FRACTION: f64 = 0.4;

/// Couple and class counts of the original field corpus after filtering.
pub const REFERENCE_CORPUS: CohortSummary = CohortSummary {
    couples: 72,
    unstressed: 763,
    stressed: 557,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub couple_id: String,
    pub participant_id: String,
    pub hour_index: u32,
    pub features: Vec<f64>,
    pub stress_raw: Option<f64>,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CohortSummary {
    pub couples: usize,
    pub unstressed: usize,
    pub stressed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    samples: Vec<Sample>,
    dim: usize,
    /// couple id → sample indices, sorted by (hour_index, participant_id).
    couples: BTreeMap<String, Vec<usize>>,
}

impl Cohort {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let dim = samples.first().map_or(0, |s| s.features.len());
        let mut seen = std::collections::BTreeSet::new();
        for s in &samples {
            if s.features.len() != dim {
                return Err(Error::Shape(format!(
                    "sample of couple {} has {} features, expected {dim}",
                    s.couple_id,
                    s.features.len()
                )));
            }
            if s.label > 1 {
                return Err(Error::Config(format!("label {} is not binary", s.label)));
            }
            if !seen.insert((s.participant_id.as_str(), s.hour_index)) {
                return Err(Error::Config(format!(
                    "participant {} has duplicate hour_index {}",
                    s.participant_id, s.hour_index
                )));
            }
        }
        let mut couples: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            couples.entry(s.couple_id.clone()).or_default().push(i);
        }
        for idx in couples.values_mut() {
            idx.sort_by(|&a, &b| {
                let (sa, sb) = (&samples[a], &samples[b]);
                (sa.hour_index, &sa.participant_id).cmp(&(sb.hour_index, &sb.participant_id))
            });
        }
        Ok(Cohort {
            samples,
            dim,
            couples,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn couple_ids(&self) -> impl Iterator<Item = &str> {
        self.couples.keys().map(String::as_str)
    }

    pub fn couple_count(&self) -> usize {
        self.couples.len()
    }

    /// Sample indices of a couple in temporal order.
    pub fn couple(&self, id: &str) -> Option<&[usize]> {
        self.couples.get(id).map(Vec::as_slice)
    }

    pub fn summary(&self) -> CohortSummary {
        let stressed = self.samples.iter().filter(|s| s.label == 1).count();
        CohortSummary {
            couples: self.couples.len(),
            unstressed: self.samples.len() - stressed,
            stressed,
        }
    }

    /// Fraction of stressed hours per couple, in couple-id order.
    pub fn base_rates(&self) -> Vec<(String, f64)> {
        self.couples
            .iter()
            .map(|(id, idx)| {
                let s = idx.iter().filter(|&&i| self.samples[i].label == 1).count();
                (id.clone(), s as f64 / idx.len() as f64)
            })
            .collect()
    }

    /// True when the couple's early hours contain both classes.
    pub fn is_eligible(&self, couple: &str) -> bool {
        self.couple(couple).is_some_and(|idx| {
            let early = &idx[..early_count(idx.len())];
            let stressed = early
                .iter()
                .filter(|&&i| self.samples[i].label == 1)
                .count();
            stressed > 0 && stressed < early.len()
        })
    }

    /// Drops couples whose early hours lack either class.
    pub fn eligible_only(self) -> Result<Self> {
        let keep: std::collections::BTreeSet<String> = self
            .couple_ids()
            .filter(|c| self.is_eligible(c))
            .map(str::to_owned)
            .collect();
        Cohort::new(
            self.samples
                .into_iter()
                .filter(|s| keep.contains(&s.couple_id))
                .collect(),
        )
    }

    pub fn features(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.dim));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r)
                .assign(&Array1::from(self.samples[i].features.clone()));
        }
        out
    }

    pub fn labelled(&self, indices: &[usize]) -> LabelledSet {
        LabelledSet {
            features: self.features(indices),
            labels: indices.iter().map(|&i| self.samples[i].label).collect(),
            origin: indices.to_vec(),
        }
    }
}

/// `⌊0.4·n⌋`, at least one.
pub fn early_count(n: usize) -> usize {
    ((EARLY_FRACTION * n as f64).floor() as usize).max(1).min(n)
}

/// Feature rows with binary labels and the cohort index each row came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelledSet {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
    pub origin: Vec<usize>,
}

impl LabelledSet {
    pub fn new(features: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let origin = (0..labels.len()).collect();
        Ok(LabelledSet {
            features,
            labels,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn select(&self, rows: &[usize]) -> LabelledSet {
        LabelledSet {
            features: self.features.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            origin: rows.iter().map(|&r| self.origin[r]).collect(),
        }
    }

    /// Row-wise concatenation.
    pub fn concat(&self, other: &LabelledSet) -> Result<LabelledSet> {
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        let features = ndarray::concatenate(
            ndarray::Axis(0),
            &[self.features.view(), other.features.view()],
        )
        .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(LabelledSet {
            features,
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
            origin: self.origin.iter().chain(&other.origin).copied().collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// CSV

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// A raw score strictly above this counts as stressed.
    pub label_threshold: f64,
    pub eligibility_filter: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            label_threshold: 0.0,
            eligibility_filter: true,
        }
    }
}

pub fn binarize(stress_raw: f64, threshold: f64) -> u8 {
    u8::from(stress_raw > threshold)
}

/// Reads a cohort CSV. Rows with a missing feature, or with neither a label
/// nor a raw score, are dropped.
pub fn load_csv(path: &Path, opts: LoadOptions) -> Result<Cohort> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    let dim = check_header(path, &header)?;

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, 0, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::Schema {
                path: path.to_owned(),
                message: format!(
                    "line {line}: expected {} columns, found {}",
                    header.len(),
                    record.len()
                ),
            });
        }
        let ingest = |message: String| Error::Ingest {
            path: path.to_owned(),
            line,
            message,
        };
        let parse_f64 = |field: &str, name: &str| -> Result<Option<f64>> {
            if field.is_empty() {
                return Ok(None);
            }
            field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| ingest(format!("{name}: cannot parse {field:?} as a number")))
        };

        let couple_id = record[0].to_owned();
        let participant_id = record[1].to_owned();
        if couple_id.is_empty() || participant_id.is_empty() {
            return Err(ingest("couple_id and participant_id are required".into()));
        }
        let hour_index = record[2]
            .parse::<u32>()
            .map_err(|_| ingest(format!("hour_index: cannot parse {:?}", &record[2])))?;
        let stress_raw = parse_f64(&record[3], "stress_raw")?;
        if let Some(raw) = stress_raw {
            if !(0.0..=100.0).contains(&raw) {
                return Err(ingest(format!("stress_raw {raw} outside [0, 100]")));
            }
        }
        let label = match &record[4] {
            "" => stress_raw.map(|r| binarize(r, opts.label_threshold)),
            "0" => Some(0),
            "1" => Some(1),
            other => {
                return Err(ingest(format!(
                    "label must be 0, 1 or empty, got {other:?}"
                )))
            }
        };
        let mut features = Vec::with_capacity(dim);
        let mut missing = false;
        for k in 0..dim {
            match parse_f64(&record[5 + k], &header[5 + k])? {
                Some(v) => features.push(v),
                None => missing = true,
            }
        }
        let Some(label) = label else { continue };
        if missing {
            continue;
        }
        samples.push(Sample {
            couple_id,
            participant_id,
            hour_index,
            features,
            stress_raw,
            label,
        });
    }
    let cohort = Cohort::new(samples)?;
    if opts.eligibility_filter {
        cohort.eligible_only()
    } else {
        Ok(cohort)
    }
}

fn check_header(path: &Path, header: &csv::StringRecord) -> Result<usize> {
    let schema = |message: String| Error::Schema {
        path: path.to_owned(),
        message,
    };
    if header.len() <= CSV_FIXED_COLUMNS.len() {
        return Err(schema(format!(
            "header has {} columns, need at least 6",
            header.len()
        )));
    }
    for (k, want) in CSV_FIXED_COLUMNS.iter().enumerate() {
        if &header[k] != *want {
            return Err(schema(format!(
                "column {k} must be {want:?}, found {:?}",
                &header[k]
            )));
        }
    }
    let dim = header.len() - CSV_FIXED_COLUMNS.len();
    for k in 0..dim {
        let want = format!("f{k}");
        if header[5 + k] != want {
            return Err(schema(format!(
                "feature column {k} must be {want:?}, found {:?}",
                &header[5 + k]
            )));
        }
    }
    Ok(dim)
}

fn csv_error(path: &Path, line: u64, e: csv::Error) -> Error {
    let line = e.position().map_or(line, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path.display().to_string(), io),
        other => Error::Ingest {
            path: path.to_owned(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Writes the cohort in the ingestion schema. Floats use Rust's shortest
/// round-trip formatting so a reload reproduces the values exactly.
pub fn write_csv(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, 0, e))?;
    let mut header: Vec<String> = CSV_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..cohort.dim()).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(|e| csv_error(path, 0, e))?;
    for s in cohort.samples() {
        let mut row = vec![
            s.couple_id.clone(),
            s.participant_id.clone(),
            s.hour_index.to_string(),
            s.stress_raw.map_or_else(String::new, |r| r.to_string()),
            s.label.to_string(),
        ];
        row.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, 0, e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Synthetic cohorts

/// Parameters of the synthetic cohort generator.
///
/// Each couple draws a stress base rate from `Beta(alpha, beta)` and a latent
/// offset of norm `shift`. Hours are latent Gaussians around one of two class
/// prototypes `separation` apart, pushed through a fixed random linear map and
/// an elementwise `tanh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub couples: usize,
    pub samples_per_couple: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Norm of each couple's latent offset.
    pub shift: f64,
    /// Standard deviation of each couple's displacement along its own stress
    /// direction: a per-couple baseline that mimics a change in base rate.
    pub axis_shift: f64,
    /// Standard deviation of each couple's drift along its stress direction
    /// between its first and last hour.
    pub drift: f64,
    /// Norm of each couple's offset added to the observed features, in a
    /// random direction of the full feature space.
    pub feature_shift: f64,
    /// Distance between the two class prototypes in latent space.
    pub separation: f64,
    /// Angular spread of each couple's own stress direction around the shared one.
    pub direction_jitter: f64,
    /// Gain of the latent-to-feature map before `tanh`.
    pub gain: f64,
    /// Keep only couples whose early hours contain both classes.
    pub eligible_only: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            couples: 72,
            samples_per_couple: 18,
            feature_dim: 91,
            latent_dim: 8,
            alpha: 1.2,
            beta: 2.4,
            shift: 5.0,
            axis_shift: 0.0,
            drift: 0.0,
            feature_shift: 0.0,
            separation: 2.0,
            direction_jitter: 2.0,
            gain: 0.5,
            eligible_only: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("couples", self.couples),
            ("samples_per_couple", self.samples_per_couple),
            ("feature_dim", self.feature_dim),
            ("latent_dim", self.latent_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth.{name} must be positive")));
        }
        if self.samples_per_couple < 3 {
            return Err(Error::Config(
                "synth.samples_per_couple must be at least 3".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(
                "synth Beta parameters must be positive".into(),
            ));
        }
        let reals = [
            ("shift", self.shift),
            ("axis_shift", self.axis_shift),
            ("drift", self.drift),
            ("feature_shift", self.feature_shift),
            ("separation", self.separation),
            ("direction_jitter", self.direction_jitter),
            ("gain", self.gain),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "synth.{name} must be finite and non-negative"
            )));
        }
        Ok(())
    }

    /// Per-couple base rates, in couple order, exactly as the generator draws them.
    pub fn base_rates(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let beta = Beta::new(self.alpha, self.beta).map_err(|e| Error::Config(e.to_string()))?;
        let mut r = rng::stream(self.seed, &[rng::tag("synth.base_rates")]);
        Ok((0..self.couples).map(|_| beta.sample(&mut r)).collect())
    }
}

fn unit_vector(r: &mut impl Rng, k: usize) -> Array1<f64> {
    loop {
        let v = Array1::<f64>::from_shape_simple_fn(k, || StandardNormal.sample(r));
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
    }
}

pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    let rates = cfg.base_rates()?;
    let k = cfg.latent_dim;
    let mut world = rng::stream(cfg.seed, &[rng::tag("synth.world")]);
    let map = Array2::from_shape_simple_fn((cfg.feature_dim, k), || {
        let z: f64 = StandardNormal.sample(&mut world);
        z * cfg.gain / (k as f64).sqrt()
    });
    let stress_axis = unit_vector(&mut world, k);
    let width = (cfg.couples.max(1) as f64).log10().floor() as usize + 1;

    let mut samples = Vec::new();
    for (c, &rate) in rates.iter().enumerate() {
        let mut r = rng::stream(cfg.seed, &[rng::tag("synth.couple"), c as u64]);
        let couple_id = format!("C{:0width$}", c + 1);
        let offset = unit_vector(&mut r, k) * cfg.shift;
        let feature_offset = unit_vector(&mut r, cfg.feature_dim) * cfg.feature_shift;
        let baseline: f64 = StandardNormal.sample(&mut r);
        let drift: f64 = StandardNormal.sample(&mut r);
        let axis = {
            let v = &stress_axis + &(unit_vector(&mut r, k) * cfg.direction_jitter);
            let n = v.dot(&v).sqrt();
            v / n
        };
        let offset = offset + &(&axis * (baseline * cfg.axis_shift));
        let spread = (cfg.samples_per_couple / 3).max(1);
        let n = r.random_range(cfg.samples_per_couple - spread..=cfg.samples_per_couple + spread);
        // each participant contributes roughly half the hours
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random::<f64>() < rate)).collect();
        if cfg.eligible_only {
            force_early_classes(&mut labels, &mut r);
        }
        let mut hours: Vec<(usize, u32)> = (0..n).map(|h| (h % 2, (h / 2) as u32)).collect();
        hours.shuffle(&mut r);
        hours.sort_by_key(|&(p, h)| (h, p));
        for (t, (label, &(p, hour))) in labels.iter().zip(&hours).enumerate() {
            let sign = if *label == 1 { 0.5 } else { -0.5 };
            let elapsed = t as f64 / (n - 1) as f64;
            let z = Array1::<f64>::from_shape_simple_fn(k, || StandardNormal.sample(&mut r))
                + &offset
                + &(&axis * (sign * cfg.separation + drift * cfg.drift * elapsed));
            let features = (map.dot(&z).mapv(f64::tanh) + &feature_offset).to_vec();
            let raw = if *label == 1 {
                r.random_range(1..=100) as f64
            } else {
                0.0
            };
            samples.push(Sample {
                couple_id: couple_id.clone(),
                participant_id: format!("{couple_id}-P{}", p + 1),
                hour_index: hour,
                features,
                stress_raw: Some(raw),
                label: *label,
            });
        }
    }
    Cohort::new(samples)
}

/// Ensures the early hours contain both classes by flipping one early label.
fn force_early_classes(labels: &mut [u8], r: &mut impl Rng) {
    let early = early_count(labels.len());
    for class in [0u8, 1] {
        if !labels[..early].contains(&class) {
            let candidates: Vec<usize> = (0..early)
                .filter(|&i| labels[..early].iter().filter(|&&l| l == labels[i]).count() > 1)
                .collect();
            if let Some(&i) = candidates.get(r.random_range(0..candidates.len().max(1))) {
                labels[i] = class;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Target splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    FewShot,
    OneShot,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FewShot => "few-shot",
            Mode::OneShot => "one-shot",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "few-shot" => Ok(Mode::FewShot),
            "one-shot" => Ok(Mode::OneShot),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (few-shot, one-shot)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetSplit {
    pub target_couple: String,
    /// `X_a`, `Y_a`: the target's earliest labelled hours.
    pub labelled: LabelledSet,
    /// `X_b`: the remaining target hours. Labels are kept only in `withheld`.
    pub unlabelled: Array2<f64>,
    pub unlabelled_origin: Vec<usize>,
    pub withheld: Vec<u8>,
    /// Every non-target sample.
    pub pool: LabelledSet,
}

/// Why a fold could not be run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitOutcome {
    Ready(Box<TargetSplit>),
    Skipped(String),
}

pub fn split_target(cohort: &Cohort, target: &str, mode: Mode) -> Result<SplitOutcome> {
    let idx = cohort
        .couple(target)
        .ok_or_else(|| Error::Config(format!("unknown target couple {target:?}")))?;
    if idx.len() < 2 {
        return Ok(SplitOutcome::Skipped(format!(
            "couple {target} has {} sample(s), need at least 2",
            idx.len()
        )));
    }
    let n_a = match mode {
        Mode::FewShot => early_count(idx.len()),
        Mode::OneShot => 1,
    };
    let (a, b) = idx.split_at(n_a);
    let pool: Vec<usize> = (0..cohort.len())
        .filter(|&i| cohort.sample(i).couple_id != target)
        .collect();
    Ok(SplitOutcome::Ready(Box::new(TargetSplit {
        target_couple: target.to_owned(),
        labelled: cohort.labelled(a),
        unlabelled: cohort.features(b),
        unlabelled_origin: b.to_vec(),
        withheld: b.iter().map(|&i| cohort.sample(i).label).collect(),
        pool: cohort.labelled(&pool),
    })))
}

impl PartialEq for TargetSplit {
    fn eq(&self, other: &Self) -> bool {
        self.target_couple == other.target_couple
            && self.labelled == other.labelled
            && self.unlabelled_origin == other.unlabelled_origin
            && self.pool.origin == other.pool.origin
    }
}

impl Eq for TargetSplit {}
