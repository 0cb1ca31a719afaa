//! Sample selection around a target's labelled anchors.
//!
//! - [`select_closest`] picks the non-target samples nearest (in feature
//!   space, matched label) to the target's labelled hours.
//! - [`make_pairs`] forms two Siamese pairs per selected sample.
//! - [`resample_base_rate`] draws a labelled comparison set with an exact
//!   stressed/unstressed composition.

use ndarray::ArrayView1;
use rand::Rng;

use crate::cohort::LabelledSet;
use crate::{Error, Result};

pub const STRESSED: u8 = 1;
pub const UNSTRESSED: u8 = 0;

/// `X_selected`: pool rows chosen for one fold, with the score that ranked them.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedPool {
    pub set: LabelledSet,
    pub scores: Vec<f64>,
}

impl SelectedPool {
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

fn l2(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn nearest_anchor(x: ArrayView1<'_, f64>, anchors: &LabelledSet, label: Option<u8>) -> f64 {
    (0..anchors.len())
        .filter(|&j| label.is_none_or(|l| anchors.labels[j] == l))
        .map(|j| l2(x, anchors.features.row(j)))
        .fold(f64::INFINITY, f64::min)
}

/// Chooses up to `n` pool rows closest to the anchors.
///
/// A pool row is scored by its distance to the nearest anchor with the same
/// label. When the anchors cover only one class, rows of the missing class are
/// scored against the nearest anchor of any label and the result is split
/// `⌈n/2⌉` matched / `⌊n/2⌋` missing so both classes are represented. Ties keep
/// pool order. The output is ordered by ascending score within each group.
pub fn select_closest(pool: &LabelledSet, anchors: &LabelledSet, n: usize) -> Result<SelectedPool> {
    if pool.is_empty() {
        return Err(Error::Selection("non-target pool is empty".into()));
    }
    if anchors.is_empty() {
        return Err(Error::Selection("no labelled target anchors".into()));
    }
    if pool.dim() != anchors.dim() {
        return Err(Error::Shape(format!(
            "pool has {} features, anchors have {}",
            pool.dim(),
            anchors.dim()
        )));
    }
    let present = |l: u8| anchors.labels.contains(&l);
    let mut matched: Vec<(f64, usize)> = Vec::new();
    let mut fallback: Vec<(f64, usize)> = Vec::new();
    for i in 0..pool.len() {
        let label = pool.labels[i];
        let x = pool.features.row(i);
        if present(label) {
            matched.push((nearest_anchor(x, anchors, Some(label)), i));
        } else {
            fallback.push((nearest_anchor(x, anchors, None), i));
        }
    }
    // stable sort keeps pool order among equal scores
    matched.sort_by(|a, b| a.0.total_cmp(&b.0));
    fallback.sort_by(|a, b| a.0.total_cmp(&b.0));

    let chosen: Vec<(f64, usize)> = if fallback.is_empty() || matched.is_empty() {
        matched.into_iter().chain(fallback).take(n).collect()
    } else {
        let mut want_matched = n.div_ceil(2);
        let mut want_fallback = n / 2;
        if matched.len() < want_matched {
            want_fallback += want_matched - matched.len();
            want_matched = matched.len();
        }
        if fallback.len() < want_fallback {
            want_matched = (want_matched + want_fallback - fallback.len()).min(matched.len());
            want_fallback = fallback.len();
        }
        matched
            .into_iter()
            .take(want_matched)
            .chain(fallback.into_iter().take(want_fallback))
            .collect()
    };
    let rows: Vec<usize> = chosen.iter().map(|&(_, i)| i).collect();
    Ok(SelectedPool {
        set: pool.select(&rows),
        scores: chosen.into_iter().map(|(s, _)| s).collect(),
    })
}

/// Row references for one Siamese pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    /// Row in the selected pool.
    pub selected: usize,
    /// Row in the labelled anchor set.
    pub anchor: usize,
    /// 0 when the labels agree, 1 when they differ.
    pub similarity: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Two pairs per selected row, each with an anchor drawn uniformly with
/// replacement.
pub fn make_pairs(
    selected: &SelectedPool,
    anchors: &LabelledSet,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    if anchors.is_empty() {
        return Err(Error::Selection(
            "cannot pair without labelled anchors".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(2 * selected.len());
    for i in 0..selected.len() {
        for _ in 0..2 {
            let j = rng.random_range(0..anchors.len());
            pairs.push(Pair {
                selected: i,
                anchor: j,
                similarity: u8::from(selected.set.labels[i] != anchors.labels[j]),
            });
        }
    }
    Ok(PairBatch { pairs })
}

/// A labelled comparison set with a fixed stressed share.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSample {
    pub set: LabelledSet,
    pub rate: f64,
    pub realized_rate: f64,
}

/// Number of stressed rows in a rate-`p` draw of size `m` (half rounds away from zero).
pub fn stressed_count(p: f64, m: usize) -> usize {
    (p * m as f64).round() as usize
}

/// Draws `round(p·m)` stressed and `m − round(p·m)` unstressed rows uniformly
/// with replacement from `labelled`.
pub fn resample_base_rate(
    labelled: &LabelledSet,
    p: f64,
    m: usize,
    rng: &mut impl Rng,
) -> Result<RateSample> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("base rate {p} outside [0, 1]")));
    }
    if m == 0 {
        return Err(Error::Config("resample size must be at least 1".into()));
    }
    let stressed: Vec<usize> = (0..labelled.len())
        .filter(|&i| labelled.labels[i] == STRESSED)
        .collect();
    let unstressed: Vec<usize> = (0..labelled.len())
        .filter(|&i| labelled.labels[i] == UNSTRESSED)
        .collect();
    let k = stressed_count(p, m);
    if k > 0 && stressed.is_empty() {
        return Err(Error::Resampling { class: "stressed" });
    }
    if k < m && unstressed.is_empty() {
        return Err(Error::Resampling {
            class: "unstressed",
        });
    }
    let mut rows = Vec::with_capacity(m);
    rows.extend((0..k).map(|_| stressed[rng.random_range(0..stressed.len())]));
    rows.extend((k..m).map(|_| unstressed[rng.random_range(0..unstressed.len())]));
    Ok(RateSample {
        set: labelled.select(&rows),
        rate: p,
        realized_rate: k as f64 / m as f64,
    })
}
