//! Entropic optimal transport between two uniformly weighted point clouds.
//!
//! The ground cost is the Euclidean distance between rows. [`sinkhorn`] runs
//! the log-domain (potential) form of the Sinkhorn updates, which stays finite
//! for small regularisation where the scaling form underflows. The reported
//! distance is the transport cost `Σ γᵢⱼ Cᵢⱼ` of the final plan; the entropy
//! term is not included.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::{Error, Result};

/// Pairs closer than this contribute no gradient.
pub const GRAD_DISTANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(pub Array2<f64>);

impl CostMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    /// Median of the strictly positive entries, or `None` when all are zero.
    pub fn median_positive(&self) -> Option<f64> {
        let mut pos: Vec<f64> = self.0.iter().copied().filter(|&c| c > 0.0).collect();
        if pos.is_empty() {
            return None;
        }
        pos.sort_by(f64::total_cmp);
        let k = pos.len();
        Some(if k % 2 == 1 {
            pos[k / 2]
        } else {
            0.5 * (pos[k / 2 - 1] + pos[k / 2])
        })
    }
}

pub fn cost_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<CostMatrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "point dimensions differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Shape(
            "cost matrix needs at least one point per side".into(),
        ));
    }
    let c = Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    });
    Ok(CostMatrix(c))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Epsilon {
    Absolute(f64),
    /// Multiple of the median positive cost entry.
    MedianFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub epsilon: Epsilon,
    pub max_iterations: usize,
    /// Stop once the largest marginal violation is at or below this.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: Epsilon::MedianFraction(0.1),
            max_iterations: 200,
            tolerance: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        let eps_ok = match self.epsilon {
            Epsilon::Absolute(e) | Epsilon::MedianFraction(e) => e > 0.0 && e.is_finite(),
        };
        if !eps_ok {
            return Err(Error::Config(format!(
                "sinkhorn epsilon must be positive: {:?}",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("sinkhorn max_iterations must be >= 1".into()));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::Config("sinkhorn tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Resolves the regularisation strength for a given cost matrix.
    pub fn epsilon_for(&self, cost: &CostMatrix) -> f64 {
        match self.epsilon {
            Epsilon::Absolute(e) => e,
            // all-zero cost: any positive epsilon yields the same plan
            Epsilon::MedianFraction(f) => cost.median_positive().map_or(f, |m| f * m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    /// Dual potentials (in cost units) for the source and target sides.
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    pub marginal_violation: f64,
    pub converged: bool,
}

impl TransportPlan {
    pub fn total_mass(&self) -> f64 {
        self.coupling.sum()
    }

    /// Largest absolute deviation of row sums from `1/m` and column sums from `1/n`.
    pub fn max_marginal_violation(&self) -> f64 {
        let (m, n) = self.coupling.dim();
        let rows = self
            .coupling
            .sum_axis(Axis(1))
            .iter()
            .map(|r| (r - 1.0 / m as f64).abs())
            .fold(0.0, f64::max);
        let cols = self
            .coupling
            .sum_axis(Axis(0))
            .iter()
            .map(|c| (c - 1.0 / n as f64).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }

    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        (&self.coupling * &cost.0).sum()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT between the rows of `a` and `b` with uniform weights.
///
/// Non-convergence is not an error: the last plan is returned with
/// `converged == false`.
pub fn sinkhorn(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    cfg: &SinkhornConfig,
) -> Result<(f64, TransportPlan)> {
    cfg.validate()?;
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding entries".into()));
    }
    let cost = cost_matrix(a, b)?;
    sinkhorn_with_cost(&cost, cfg)
}

pub fn sinkhorn_with_cost(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<(f64, TransportPlan)> {
    cfg.validate()?;
    let c = &cost.0;
    let (m, n) = c.dim();
    let eps = cfg.epsilon_for(cost);
    let log_a = -(m as f64).ln();
    let log_b = -(n as f64).ln();

    let mut f = Array1::<f64>::zeros(m);
    let mut g = Array1::<f64>::zeros(n);
    let mut iterations = 0;
    let mut violation = f64::INFINITY;

    while iterations < cfg.max_iterations {
        iterations += 1;
        for i in 0..m {
            let row = c.row(i);
            let lse = log_sum_exp((0..n).map(|j| (g[j] - row[j]) / eps));
            f[i] = eps * (log_a - lse);
        }
        for j in 0..n {
            let col = c.column(j);
            let lse = log_sum_exp((0..m).map(|i| (f[i] - col[i]) / eps));
            g[j] = eps * (log_b - lse);
        }
        // columns are exact after the g-update; rows carry the residual
        violation = (0..m)
            .map(|i| {
                let row = c.row(i);
                let s: f64 = (0..n).map(|j| ((f[i] + g[j] - row[j]) / eps).exp()).sum();
                (s - 1.0 / m as f64).abs()
            })
            .fold(0.0, f64::max);
        if violation <= cfg.tolerance {
            break;
        }
    }

    let coupling = Array2::from_shape_fn((m, n), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / eps).exp());
    if coupling.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "sinkhorn produced a non-finite coupling".into(),
        ));
    }
    let plan = TransportPlan {
        coupling,
        u: f,
        v: g,
        epsilon: eps,
        iterations,
        marginal_violation: violation,
        converged: violation <= cfg.tolerance,
    };
    let distance = plan.transport_cost(cost);
    Ok((distance, plan))
}

/// Gradient of `Σ γᵢⱼ ‖aᵢ − bⱼ‖` with the plan held fixed.
pub fn sinkhorn_embedding_grads(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    plan: &TransportPlan,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (m, n) = plan.coupling.dim();
    if a.nrows() != m || b.nrows() != n || a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "plan is {m}x{n} but embeddings are {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let d = a.ncols();
    let mut ga = Array2::<f64>::zeros((m, d));
    let mut gb = Array2::<f64>::zeros((n, d));
    let mut diff = vec![0.0; d];
    for i in 0..m {
        for j in 0..n {
            let w = plan.coupling[[i, j]];
            if w == 0.0 {
                continue;
            }
            let mut sq = 0.0;
            for k in 0..d {
                diff[k] = a[[i, k]] - b[[j, k]];
                sq += diff[k] * diff[k];
            }
            let dist = sq.sqrt();
            if dist < GRAD_DISTANCE_FLOOR {
                continue;
            }
            let s = w / dist;
            for k in 0..d {
                ga[[i, k]] += s * diff[k];
                gb[[j, k]] -= s * diff[k];
            }
        }
    }
    Ok((ga, gb))
}
