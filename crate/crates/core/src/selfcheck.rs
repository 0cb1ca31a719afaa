//! Built-in oracle suite: small problems whose answers are known by
//! exhaustive computation, run against the library's fast paths.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::evalharness::f1_scores;
use crate::otcore::{self, CostMatrix, Epsilon, SinkhornConfig};
use crate::siamese::{self, PairData, SiameseModel, Wiring};
use crate::{rng, Result};

/// Marginal violation a converged plan must reach, independent of the
/// tolerance the solver was asked for.
pub const MARGINAL_REFERENCE: f64 = 1e-6;

/// Finite-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfcheckConfig {
    /// Solver settings used by the marginal-feasibility check.
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
    pub ot_instances: usize,
    pub gradient_instances: usize,
}

impl Default for SelfcheckConfig {
    fn default() -> Self {
        SelfcheckConfig {
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
            ot_instances: 50,
            gradient_instances: 20,
        }
    }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Exact optimal transport between two uniform clouds of equal size: the
/// optimum is a permutation, so enumerate all of them.
pub fn exact_uniform_ot(cost: &CostMatrix) -> f64 {
    let n = cost.0.nrows();
    assert_eq!(n, cost.0.ncols(), "permutation oracle needs a square cost");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let eval = |p: &[usize]| {
        p.iter()
            .enumerate()
            .map(|(i, &j)| cost.0[[i, j]])
            .sum::<f64>()
    };
    best = best.min(eval(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best / n as f64
}

/// Worst relative error of Sinkhorn against enumeration over seeded
/// instances with `m = n ≤ 8`, `d ≤ 4` and a small regulariser.
pub fn sinkhorn_vs_enumeration(seed: u64, instances: usize) -> Result<f64> {
    let cfg = SinkhornConfig {
        epsilon: Epsilon::MedianFraction(1e-3),
        max_iterations: 20_000,
        tolerance: 1e-9,
    };
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut r = rng::stream(seed, &[rng::tag("selfcheck.ot"), k as u64]);
        let n = r.random_range(2..=8);
        let d = r.random_range(1..=4);
        let a = gaussian(&mut r, n, d);
        let b = gaussian(&mut r, n, d);
        let (dist, _) = otcore::sinkhorn(a.view(), b.view(), &cfg)?;
        let exact = exact_uniform_ot(&otcore::cost_matrix(a.view(), b.view())?);
        worst = worst.max((dist - exact).abs() / exact);
    }
    Ok(worst)
}

/// A toy training step with everything random frozen: pairs, the
/// resampled comparison set and its transport plan.
pub struct FrozenObjective {
    pub model: SiameseModel,
    pub pairs: PairData,
    pub source: Array2<f64>,
    pub target: Array2<f64>,
    pub plan: otcore::TransportPlan,
    pub lambda: f64,
}

impl FrozenObjective {
    pub fn toy(seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[rng::tag("selfcheck.grad")]);
        let dim = 91;
        let model = SiameseModel::new(r.random(), &[dim, 8, 4, 1], Wiring::ScoreDifference)?;
        let n_pairs = r.random_range(3..=5);
        let left = gaussian(&mut r, n_pairs, dim);
        let right = gaussian(&mut r, n_pairs, dim);
        let mut similarity: Vec<u8> = (0..n_pairs).map(|_| r.random_range(0..=1)).collect();
        similarity[0] = 1;
        similarity[1] = 0;
        let pairs = PairData {
            left,
            right,
            similarity,
        };
        let m = r.random_range(2..=5);
        let source = gaussian(&mut r, m, dim);
        let target = gaussian(&mut r, m, dim) + 0.5;
        let emb = model.embed(source.view())?;
        let emb_t = model.embed(target.view())?;
        let (_, plan) = otcore::sinkhorn(emb.view(), emb_t.view(), &SinkhornConfig::default())?;
        Ok(FrozenObjective {
            model,
            pairs,
            source,
            target,
            plan,
            lambda: siamese::DEFAULT_LAMBDA,
        })
    }

    pub fn value_and_grad(&self, model: &SiameseModel) -> Result<(f64, Vec<f64>)> {
        let (c, mut g) = siamese::contrastive_loss(model, &self.pairs)?;
        let (d, gd) =
            siamese::fixed_plan_penalty(model, self.source.view(), self.target.view(), &self.plan)?;
        g.add_scaled(&gd, self.lambda);
        Ok((c + self.lambda * d, g.flatten()))
    }

    /// Compares every analytic entry with a five-point central difference of
    /// step `h`.
    pub fn gradient_check(&self, h: f64) -> Result<GradientCheck> {
        let (_, analytic) = self.value_and_grad(&self.model)?;
        let base = self.model.params.flatten();
        let mut probe = self.model.clone();
        let mut report = GradientCheck::default();
        let mut theta = base.clone();
        let mut at = |k: usize, step: f64| -> Result<f64> {
            theta[k] = base[k] + step;
            probe.params.set_flat(&theta)?;
            theta[k] = base[k];
            Ok(self.value_and_grad(&probe)?.0)
        };
        for (k, &g) in analytic.iter().enumerate() {
            let numeric = (8.0 * (at(k, h)? - at(k, -h)?) - (at(k, 2.0 * h)? - at(k, -2.0 * h)?))
                / (12.0 * h);
            report.record(g, numeric);
        }
        Ok(report)
    }
}

/// Entry-wise agreement between analytic and finite-difference gradients.
/// Entries below [`GradientCheck::SMALL`] in both are compared absolutely.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradientCheck {
    pub entries: usize,
    pub worst_relative: f64,
    pub worst_small_absolute: f64,
}

impl GradientCheck {
    pub const SMALL: f64 = 1e-8;
    pub const RELATIVE_LIMIT: f64 = 1e-4;
    pub const ABSOLUTE_LIMIT: f64 = 1e-6;

    pub fn record(&mut self, analytic: f64, numeric: f64) {
        self.entries += 1;
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if scale < Self::SMALL {
            self.worst_small_absolute = self.worst_small_absolute.max(diff);
        } else {
            self.worst_relative = self.worst_relative.max(diff / scale);
        }
    }

    pub fn merge(&mut self, other: &GradientCheck) {
        self.entries += other.entries;
        self.worst_relative = self.worst_relative.max(other.worst_relative);
        self.worst_small_absolute = self.worst_small_absolute.max(other.worst_small_absolute);
    }

    pub fn passed(&self) -> bool {
        self.worst_relative <= Self::RELATIVE_LIMIT
            && self.worst_small_absolute <= Self::ABSOLUTE_LIMIT
    }
}

/// F1 computed straight from the confusion counts, for comparison.
fn f1_by_counts(pred: &[u8], truth: &[u8]) -> (f64, f64) {
    let count = |p: u8, t: u8| {
        pred.iter()
            .zip(truth)
            .filter(|(&a, &b)| a == p && b == t)
            .count() as f64
    };
    let (tp, fp, fneg, tn) = (count(1, 1), count(1, 0), count(0, 1), count(0, 0));
    let f = |tp: f64, fp: f64, fneg: f64| {
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fneg > 0.0 {
            tp / (tp + fneg)
        } else {
            0.0
        };
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    };
    (f(tp, fp, fneg), f(tn, fneg, fp))
}

/// Number of (prediction, truth) vector pairs of length 1..=6 on which
/// `f1_scores` disagrees with the count-based formula.
pub fn f1_exhaustive_mismatches() -> Result<usize> {
    let mut bad = 0;
    for len in 1..=6usize {
        for bits in 0u32..(1 << (2 * len)) {
            let pred: Vec<u8> = (0..len).map(|i| ((bits >> i) & 1) as u8).collect();
            let truth: Vec<u8> = (0..len).map(|i| ((bits >> (len + i)) & 1) as u8).collect();
            let got = f1_scores(&pred, &truth)?;
            let (s, n) = f1_by_counts(&pred, &truth);
            if (got.stress - s).abs() > 1e-12
                || (got.nostress - n).abs() > 1e-12
                || (got.macro_f1 - 0.5 * (s + n)).abs() > 1e-12
            {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

/// Largest marginal violation of plans produced with `cfg` on seeded
/// embedding-sized clouds.
pub fn marginal_violation(cfg: &SinkhornConfig, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..5u64 {
        let mut r = rng::stream(seed, &[rng::tag("selfcheck.marginals"), k]);
        let a = gaussian(&mut r, 24, 16);
        let b = gaussian(&mut r, 30, 16) + 0.7;
        let (_, plan) = otcore::sinkhorn(a.view(), b.view(), cfg)?;
        worst = worst.max(plan.max_marginal_violation());
    }
    Ok(worst)
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run(cfg: &SelfcheckConfig) -> Vec<CheckResult> {
    vec![
        timed("sinkhorn-vs-enumeration", || {
            let worst = sinkhorn_vs_enumeration(cfg.seed, cfg.ot_instances)?;
            Ok((
                worst <= 0.02,
                format!(
                    "worst relative error {worst:.2e} over {} instances (limit 2e-2)",
                    cfg.ot_instances
                ),
            ))
        }),
        timed("gradient-finite-difference", || {
            let mut all = GradientCheck::default();
            for k in 0..cfg.gradient_instances {
                let obj = FrozenObjective::toy(rng::derive_key(cfg.seed, &[k as u64]))?;
                all.merge(&obj.gradient_check(FD_STEP)?);
            }
            Ok((
                all.passed(),
                format!(
                    "{} entries over {} instances: worst relative {:.2e} (limit 1e-4), worst small-entry absolute {:.2e} (limit 1e-6)",
                    all.entries, cfg.gradient_instances, all.worst_relative, all.worst_small_absolute
                ),
            ))
        }),
        timed("f1-exhaustive", || {
            let bad = f1_exhaustive_mismatches()?;
            Ok((
                bad == 0,
                format!("{bad} mismatches over all vectors of length <= 6"),
            ))
        }),
        timed("sinkhorn-marginals", || {
            let v = marginal_violation(&cfg.sinkhorn, cfg.seed)?;
            Ok((
                v <= MARGINAL_REFERENCE,
                format!("max marginal violation {v:.2e} (limit {MARGINAL_REFERENCE:.0e})"),
            ))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_on_a_known_matching() {
        // crossing assignment is optimal
        let cost = CostMatrix(ndarray::array![[5.0, 1.0], [1.0, 5.0]]);
        assert_eq!(exact_uniform_ot(&cost), 1.0);
        let cost = CostMatrix(ndarray::array![
            [0.0, 9.0, 9.0],
            [9.0, 9.0, 0.0],
            [9.0, 0.0, 9.0]
        ]);
        assert_eq!(exact_uniform_ot(&cost), 0.0);
    }

    #[test]
    fn loose_tolerance_breaks_marginals() {
        let loose = SinkhornConfig {
            tolerance: 0.5,
            ..SinkhornConfig::default()
        };
        assert!(marginal_violation(&loose, 0).unwrap() > MARGINAL_REFERENCE);
        assert!(marginal_violation(&SinkhornConfig::default(), 0).unwrap() <= MARGINAL_REFERENCE);
    }

    #[test]
    fn frozen_objective_slices() {
        let obj = FrozenObjective::toy(3).unwrap();
        assert_eq!(obj.source.ncols(), 91);
        let check = obj.gradient_check(FD_STEP).unwrap();
        assert_eq!(check.entries, obj.model.params.param_count());
        assert!(check.passed(), "{check:?}");
    }
}
