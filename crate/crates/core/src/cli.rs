//! Command-line front end: `generate`, `run`, `plot` and `selfcheck`.
//!
//! Configuration is a TOML file with one table per stage. Every key has a
//! default, so an empty file is valid. `--override key=value` patches single
//! keys; `key` may be a full dotted path or any unambiguous suffix of one.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{self, Cohort, CohortSummary, LoadOptions, SynthConfig};
use crate::downstream;
use crate::evalharness::{
    self, ExperimentConfig, FoldEmbeddings, MetricsReport, Variant, GROUP_NAMES,
};
use crate::otcore::SinkhornConfig;
use crate::selfcheck::{self, SelfcheckConfig};
use crate::{rng, Error, Result};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_CHECK: u8 = 4;

/// Fig.-3 style plots show at most this many points.
pub const PLOT_POINTS: usize = 96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Cohort CSV to load; empty means generate from `[synth]`.
    pub csv: String,
    pub label_threshold: f64,
    pub eligibility_filter: bool,
    /// With synthetic data, draw a fresh cohort for every experiment seed
    /// (cohort seed = `synth.seed + seed`).
    pub cohort_per_seed: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let load = LoadOptions::default();
        DataConfig {
            csv: String::new(),
            label_threshold: load.label_threshold,
            eligibility_filter: load.eligibility_filter,
            cohort_per_seed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    pub points: usize,
    pub seed: u64,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            points: PLOT_POINTS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfcheckSection {
    pub seed: u64,
    pub ot_instances: usize,
    pub gradient_instances: usize,
}

impl Default for SelfcheckSection {
    fn default() -> Self {
        let d = SelfcheckConfig::default();
        SelfcheckSection {
            seed: d.seed,
            ot_instances: d.ot_instances,
            gradient_instances: d.gradient_instances,
        }
    }
}

/// Everything a command needs, after defaults and overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub experiment: ExperimentConfig,
    pub plot: PlotConfig,
    pub selfcheck: SelfcheckSection,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn collect_paths(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if let toml::Value::Table(t) = v {
            collect_paths(t, &path, out);
        }
        out.push(path);
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

impl RunConfig {
    /// Every key accepted by the configuration file, as dotted paths.
    pub fn documented_keys() -> Vec<String> {
        let table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut out = Vec::new();
        collect_paths(&table, "", &mut out);
        out.sort();
        out
    }

    /// Resolves an override key to a full path.
    pub fn resolve_key(key: &str) -> Result<String> {
        let keys = Self::documented_keys();
        if keys.iter().any(|k| k == key) {
            return Ok(key.to_owned());
        }
        let suffix = format!(".{key}");
        let hits: Vec<&String> = keys.iter().filter(|k| k.ends_with(&suffix)).collect();
        match hits.as_slice() {
            [one] => Ok((*one).clone()),
            [] => Err(Error::Config(format!(
                "unknown configuration key {key:?}; valid keys:\n  {}",
                keys.join("\n  ")
            ))),
            many => Err(Error::Config(format!(
                "ambiguous key {key:?}; candidates: {}",
                many.iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))),
        }
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let parsed: toml::Table = toml::from_str(text).map_err(config_err)?;
        // unknown keys in the file are reported by deserialization
        let base: RunConfig = parsed.try_into().map_err(config_err)?;
        let mut table = toml::Table::try_from(&base).map_err(config_err)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let path = Self::resolve_key(key.trim())?;
            set_path(&mut table, &path, parse_value(raw.trim()))?;
        }
        let cfg: RunConfig = table.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::io(format!("reading config {}", p.display()), e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.experiment.validate()?;
        if self.plot.points == 0 {
            return Err(Error::Config("plot.points must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(6).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            label_threshold: self.data.label_threshold,
            eligibility_filter: self.data.eligibility_filter,
        }
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        self.experiment.train.penalty.sinkhorn
    }

    /// `--seed` sets every seed at once.
    pub fn apply_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.experiment.seeds = vec![seed];
        self.plot.seed = seed;
        self.selfcheck.seed = seed;
    }
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut cur = table;
    for p in parts {
        cur = match cur.get_mut(p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("{path}: {p} is not a table"))),
        };
    }
    let value = match (cur.get(last), value) {
        // `variants=baseline1,proposed` for list-valued keys
        (Some(toml::Value::Array(_)), toml::Value::String(s)) => {
            toml::Value::Array(s.split(',').map(|x| parse_value(x.trim())).collect())
        }
        (Some(toml::Value::Array(_)), v @ (toml::Value::Integer(_) | toml::Value::Float(_))) => {
            toml::Value::Array(vec![v])
        }
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    cur.insert(last.to_owned(), value);
    Ok(())
}

// ---------------------------------------------------------------------------
// Verbs

/// Builds or loads the cohort described by the configuration.
pub fn load_cohort(cfg: &RunConfig) -> Result<Cohort> {
    if cfg.data.csv.is_empty() {
        let c = cohort::generate_cohort(&cfg.synth)?;
        if cfg.data.eligibility_filter {
            c.eligible_only()
        } else {
            Ok(c)
        }
    } else {
        cohort::load_csv(Path::new(&cfg.data.csv), cfg.load_options())
    }
}

fn quartiles(mut v: Vec<f64>) -> [f64; 3] {
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    [q(0.25), q(0.5), q(0.75)]
}

/// Human-readable cohort summary.
pub fn describe_cohort(c: &Cohort) -> String {
    let s: CohortSummary = c.summary();
    let rates: Vec<f64> = c.base_rates().into_iter().map(|(_, r)| r).collect();
    let mut out = format!(
        "{} couples, {} samples ({} stressed, {} unstressed), {} features\n",
        s.couples,
        c.len(),
        s.stressed,
        s.unstressed,
        c.dim()
    );
    if !rates.is_empty() {
        let [q1, q2, q3] = quartiles(rates);
        let _ = writeln!(
            out,
            "per-couple base rate quartiles: {q1:.3} / {q2:.3} / {q3:.3}"
        );
    }
    out
}

/// Writes the configured cohort to `out` and returns its summary text.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let c = load_cohort(cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    cohort::write_csv(&c, out)?;
    Ok(describe_cohort(&c))
}

/// Runs the experiment grid, regenerating the cohort per seed when asked.
pub fn experiment(cfg: &RunConfig) -> Result<MetricsReport> {
    if !cfg.data.csv.is_empty() || !cfg.data.cohort_per_seed {
        let c = load_cohort(cfg)?;
        return evalharness::run_experiment(&c, &cfg.experiment);
    }
    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let mut per = cfg.clone();
        per.synth.seed = cfg.synth.seed.wrapping_add(seed);
        per.experiment.seeds = vec![seed];
        let report = evalharness::run_experiment(&load_cohort(&per)?, &per.experiment)?;
        folds.extend(report.folds);
        skipped.extend(report.skipped);
    }
    MetricsReport::from_folds(folds, skipped)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

pub fn embeddings_csv(e: &FoldEmbeddings) -> String {
    let mut out = String::from("sample_id,group");
    for k in 0..e.embeddings.ncols() {
        let _ = write!(out, ",e{k}");
    }
    out.push('\n');
    for (i, row) in e.embeddings.axis_iter(Axis(0)).enumerate() {
        out.push_str(&e.sample_ids[i]);
        out.push(',');
        out.push_str(e.groups[i]);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes every report file into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    write(&dir.join("folds.csv"), &report.folds_csv())?;
    write(&dir.join("pooled.csv"), &report.pooled_csv())?;
    write(&dir.join("summary.csv"), &report.summary_csv())?;
    write(&dir.join("skipped.csv"), &report.skipped_csv())?;
    write(&dir.join("table.txt"), &report.text_table())?;
    let logs = dir.join("logs");
    let embeds = dir.join("embeddings");
    for f in &report.folds {
        if let Some(loss) = f.variant.loss() {
            mkdir(&logs)?;
            let mut text = String::from(crate::siamese::LossBreakdown::CSV_HEADER);
            text.push('\n');
            for row in &f.log {
                text.push_str(&row.csv_row(&f.id(), loss));
                text.push('\n');
            }
            write(&logs.join(format!("{}.csv", f.id())), &text)?;
        }
        if let Some(e) = &f.embeddings {
            mkdir(&embeds)?;
            write(&embeds.join(format!("{}.csv", f.id())), &embeddings_csv(e))?;
        }
    }
    Ok(())
}

/// Mean pooled macro-F1 difference of `a` over `b`, per mode.
pub fn macro_deltas(report: &MetricsReport, a: Variant, b: Variant) -> Vec<(cohort::Mode, f64)> {
    let mut out = Vec::new();
    for mode in [cohort::Mode::FewShot, cohort::Mode::OneShot] {
        if let (Some(x), Some(y)) = (report.summary_for(mode, a), report.summary_for(mode, b)) {
            out.push((mode, x.mean.macro_f1 - y.mean.macro_f1));
        }
    }
    out
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: MetricsReport,
}

/// Creates `<out_root>/<config-hash>-<UTC timestamp>` and fills it.
pub fn run(cfg: &RunConfig, out_root: &Path) -> Result<RunArtifacts> {
    let report = experiment(cfg)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{}-{stamp}", cfg.hash());
    let mut dir = out_root.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = out_root.join(format!("{base}-{k}"));
        k += 1;
    }
    mkdir(&dir)?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    write_report(&report, &dir)?;
    Ok(RunArtifacts { dir, report })
}

/// Reads an embeddings file written by [`write_report`].
pub fn read_embeddings(path: &Path) -> Result<FoldEmbeddings> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("reading {}", path.display()), io),
        other => Error::Schema {
            path: path.to_owned(),
            message: format!("{other:?}"),
        },
    })?;
    let mut ids = Vec::new();
    let mut groups = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Schema {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let group = GROUP_NAMES
            .iter()
            .find(|g| **g == &rec[1])
            .ok_or_else(|| Error::Ingest {
                path: path.to_owned(),
                line,
                message: format!("unknown group {:?}", &rec[1]),
            })?;
        ids.push(rec[0].to_owned());
        groups.push(*group);
        width.get_or_insert(rec.len() - 2);
        for field in rec.iter().skip(2) {
            values.push(field.parse::<f64>().map_err(|e| Error::Ingest {
                path: path.to_owned(),
                line,
                message: e.to_string(),
            })?);
        }
    }
    let width = width.unwrap_or(0);
    let embeddings = Array2::from_shape_vec((ids.len(), width), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FoldEmbeddings {
        sample_ids: ids,
        groups,
        embeddings,
    })
}

/// Indices of at most `max` points, drawn without replacement and returned
/// in ascending order.
pub fn plot_sample(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut r = rng::stream(seed, &[rng::tag("plot.sample")]);
    let mut idx = rand::seq::index::sample(&mut r, n, max).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotArtifacts {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub plotted: usize,
}

const GROUP_STYLE: [(&str, &str); 4] = [
    ("#d62728", "circle"),
    ("#1f77b4", "circle"),
    ("#d62728", "triangle"),
    ("#1f77b4", "triangle"),
];

/// Scatter plot of the first two principal components, one style per group.
pub fn render_svg(groups: &[&str], coords: &Array2<f64>, title: &str) -> String {
    let (w, h, pad) = (640.0, 480.0, 48.0);
    let col = |k: usize| coords.column(k).iter().copied().collect::<Vec<f64>>();
    let (xs, ys) = (col(0), col(1));
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, lo + 1.0)
        }
    };
    let ((x0, x1), (y0, y1)) = (span(&xs), span(&ys));
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad - 160.0);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{pad}" y="24" font-size="14">{title}</text>"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="grey"/>"#,
        w - 2.0 * pad - 160.0,
        h - 2.0 * pad
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}">PC1</text>"#,
        w / 2.0 - 80.0,
        h - 14.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})">PC2</text>"#,
        h / 2.0,
        h / 2.0
    );
    let marker = |svg: &mut String, x: f64, y: f64, k: usize| {
        let (color, shape) = GROUP_STYLE[k];
        if shape == "circle" {
            let _ = writeln!(
                svg,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}" fill-opacity="0.75"/>"#
            );
        } else {
            let _ = writeln!(
                svg,
                r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}" fill-opacity="0.75"/>"#,
                x,
                y - 5.0,
                x - 4.5,
                y + 4.0,
                x + 4.5,
                y + 4.0
            );
        }
    };
    for (i, g) in groups.iter().enumerate() {
        let k = GROUP_NAMES.iter().position(|n| n == g).unwrap_or(0);
        marker(&mut svg, px(xs[i]), py(ys[i]), k);
    }
    let lx = w - pad - 140.0;
    for (k, name) in GROUP_NAMES.iter().enumerate() {
        let ly = pad + 16.0 + 20.0 * k as f64;
        marker(&mut svg, lx, ly - 4.0, k);
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}">{name}</text>"#, lx + 10.0);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Projects a stored fold's embeddings onto two principal components and
/// writes a coordinates CSV and an SVG scatter of a random subset.
pub fn plot(run_dir: &Path, fold: &str, cfg: &PlotConfig, out_dir: &Path) -> Result<PlotArtifacts> {
    let path = run_dir.join("embeddings").join(format!("{fold}.csv"));
    if !path.exists() {
        return Err(Error::io(
            format!("no stored embeddings for fold {fold:?} in {} (set experiment.keep_embeddings = true)", run_dir.display()),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let e = read_embeddings(&path)?;
    let (basis, _) = downstream::pca_project(e.embeddings.view())?;
    let keep = plot_sample(e.embeddings.nrows(), cfg.points, cfg.seed);
    let coords = basis.project(e.embeddings.select(Axis(0), &keep).view());
    let groups: Vec<&str> = keep.iter().map(|&i| e.groups[i]).collect();
    let mut csv = String::from("sample_id,group,pc1,pc2\n");
    for (row, &i) in keep.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            e.sample_ids[i],
            e.groups[i],
            coords[[row, 0]],
            coords[[row, 1]]
        );
    }
    mkdir(out_dir)?;
    let csv_path = out_dir.join(format!("{fold}.pca.csv"));
    let svg_path = out_dir.join(format!("{fold}.svg"));
    write(&csv_path, &csv)?;
    write(&svg_path, &render_svg(&groups, &coords, fold))?;
    Ok(PlotArtifacts {
        csv: csv_path,
        svg: svg_path,
        plotted: keep.len(),
    })
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "fewshot-ot",
    version,
    about = "Few-shot stress detection with base-rate-aware domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output location.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Patch one configuration key; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Write a cohort CSV (default cohort.csv).
    Generate(Common),
    /// Run the leave-one-couple-out grid into a new run directory under --out (default runs/).
    Run(Common),
    /// PCA scatter of one fold's stored embeddings.
    Plot {
        run_dir: PathBuf,
        fold: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in oracle checks.
    Selfcheck(Common),
}

fn resolve(common: &Common, fallback_config: Option<PathBuf>) -> Result<RunConfig> {
    let path = common.config.clone().or(fallback_config);
    let mut cfg = RunConfig::load(path.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Ingest { .. } | Error::Schema { .. } => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(verb: Verb) -> Result<u8> {
    match verb {
        Verb::Generate(c) => {
            let cfg = resolve(&c, None)?;
            let out = c.out.unwrap_or_else(|| PathBuf::from("cohort.csv"));
            let summary = generate(&cfg, &out)?;
            print!("{summary}");
            println!("wrote {}", out.display());
            Ok(EXIT_OK)
        }
        Verb::Run(c) => {
            let cfg = resolve(&c, None)?;
            let out = c.out.unwrap_or_else(|| PathBuf::from("runs"));
            let art = run(&cfg, &out)?;
            print!("{}", art.report.text_table());
            for (mode, d) in macro_deltas(&art.report, Variant::Proposed, Variant::Baseline1) {
                println!(
                    "{mode}: proposed - baseline1 mean macro-F1 = {:+.1} points",
                    100.0 * d
                );
            }
            println!("run directory: {}", art.dir.display());
            Ok(EXIT_OK)
        }
        Verb::Plot {
            run_dir,
            fold,
            common,
        } => {
            let stored = run_dir.join("config.toml");
            let cfg = resolve(&common, stored.exists().then_some(stored))?;
            let out = common.out.unwrap_or_else(|| run_dir.join("plots"));
            let art = plot(&run_dir, &fold, &cfg.plot, &out)?;
            println!(
                "plotted {} points: {} {}",
                art.plotted,
                art.csv.display(),
                art.svg.display()
            );
            Ok(EXIT_OK)
        }
        Verb::Selfcheck(c) => {
            let cfg = resolve(&c, None)?;
            let checks = selfcheck::run(&SelfcheckConfig {
                sinkhorn: cfg.sinkhorn(),
                seed: cfg.selfcheck.seed,
                ot_instances: cfg.selfcheck.ot_instances,
                gradient_instances: cfg.selfcheck.gradient_instances,
            });
            let mut ok = true;
            for c in &checks {
                ok &= c.passed;
                println!(
                    "{} {:<28} {:>6.2}s  {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.seconds,
                    c.detail
                );
            }
            Ok(if ok { EXIT_OK } else { EXIT_CHECK })
        }
    }
}

/// Parses arguments, runs the verb and maps failures onto exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    match dispatch(cli.verb) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Key/value listing of the resolved configuration, one dotted key per line.
pub fn flatten_config(cfg: &RunConfig) -> BTreeMap<String, String> {
    fn walk(t: &toml::Table, prefix: &str, out: &mut BTreeMap<String, String>) {
        for (k, v) in t {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                toml::Value::Table(sub) => walk(sub, &path, out),
                other => {
                    out.insert(path, other.to_string());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(
        &toml::Table::try_from(cfg).expect("config serializes"),
        "",
        &mut out,
    );
    out
}
