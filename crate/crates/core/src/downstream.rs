//! Downstream stress classifier and a two-component PCA for inspection plots.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    /// Weight of the summed hinge loss against `‖w‖²/2`, as in the usual
    /// soft-margin formulation.
    pub c: f64,
    pub epochs: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            epochs: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub weight: Array1<f64>,
    pub bias: f64,
    pub c: f64,
}

fn signed(label: u8) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

/// `‖w‖²/2 + c · Σ max(0, 1 − yᵢ(w·xᵢ + b))`
pub fn hinge_objective(
    x: ArrayView2<'_, f64>,
    labels: &[u8],
    weight: &Array1<f64>,
    bias: f64,
    c: f64,
) -> f64 {
    let hinge: f64 = x
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &l)| (1.0 - signed(l) * (row.dot(weight) + bias)).max(0.0))
        .sum();
    0.5 * weight.dot(weight) + c * hinge
}

/// Linear SVM by full-batch subgradient descent. The objective is rescaled to
/// `λ/2 · ‖w‖² + mean hinge` with `λ = 1/(c·n)` and stepped by `1/(λ·t)`; the
/// returned parameters average the iterates of the second half of training.
pub fn svm_train(x: ArrayView2<'_, f64>, labels: &[u8], cfg: &SvmConfig) -> Result<SvmModel> {
    let n = x.nrows();
    if n != labels.len() {
        return Err(Error::Shape(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(Error::Training {
            fold: String::new(),
            epoch: 0,
            message: "svm needs at least two samples".into(),
        });
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::Training {
            fold: String::new(),
            epoch: 0,
            message: "svm training data contains a single class".into(),
        });
    }
    if cfg.c.is_nan() || cfg.c <= 0.0 || cfg.epochs == 0 {
        return Err(Error::Config(
            "svm needs c > 0 and at least one epoch".into(),
        ));
    }
    let d = x.ncols();
    let y: Vec<f64> = labels.iter().map(|&l| signed(l)).collect();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let mut w_avg = Array1::<f64>::zeros(d);
    let mut b_avg = 0.0;
    let burn_in = cfg.epochs / 2;
    let mut averaged = 0usize;
    let nf = n as f64;
    let lambda = 1.0 / (cfg.c * nf);
    for t in 1..=cfg.epochs {
        let eta = 1.0 / (lambda * t as f64);
        let mut gw = &w * lambda;
        let mut gb = 0.0;
        for (row, &yi) in x.rows().into_iter().zip(&y) {
            if yi * (row.dot(&w) + b) < 1.0 {
                gw.scaled_add(-yi / nf, &row);
                gb -= yi / nf;
            }
        }
        w.scaled_add(-eta, &gw);
        b -= eta * gb;
        if t > burn_in {
            w_avg += &w;
            b_avg += b;
            averaged += 1;
        }
    }
    let k = averaged as f64;
    let model = SvmModel {
        weight: w_avg / k,
        bias: b_avg / k,
        c: cfg.c,
    };
    if !(model.weight.iter().all(|v| v.is_finite()) && model.bias.is_finite()) {
        return Err(Error::Numeric("svm parameters are not finite".into()));
    }
    Ok(model)
}

impl SvmModel {
    pub fn decision(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.weight.len() {
            return Err(Error::Shape(format!(
                "svm expects {} features, got {}",
                self.weight.len(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight) + self.bias)
    }
}

/// `1` iff `w·e + b > 0`.
pub fn svm_predict(model: &SvmModel, x: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
    Ok(model
        .decision(x)?
        .iter()
        .map(|&s| u8::from(s > 0.0))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Array1<f64>,
    /// Shape `(2, d)`, rows are unit principal directions.
    pub components: Array2<f64>,
    pub explained: [f64; 2],
}

impl PcaBasis {
    pub fn project(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean).dot(&self.components.t())
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Eigenvalues are returned in descending order, eigenvectors as columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let vectors = v.select(Axis(1), &order);
    (values, vectors)
}

/// Projects onto the top two principal directions of the centred data. Each
/// direction's largest-magnitude entry is made positive.
pub fn pca_project(x: ArrayView2<'_, f64>) -> Result<(PcaBasis, Array2<f64>)> {
    let (n, d) = x.dim();
    if n < 3 {
        return Err(Error::Shape(format!("pca needs at least 3 rows, got {n}")));
    }
    if d < 2 {
        return Err(Error::Shape("pca needs at least 2 columns".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let centred = &x - &mean;
    let cov = centred.t().dot(&centred) / (n - 1) as f64;
    let total: f64 = cov.diag().sum();
    if total.is_nan() || total <= 1e-300 {
        return Err(Error::DegenerateBasis("data has zero variance".into()));
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let mut components = Array2::<f64>::zeros((2, d));
    for k in 0..2 {
        let mut col = vectors.column(k).to_owned();
        let lead = col
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            col.mapv_inplace(|v| -v);
        }
        components.row_mut(k).assign(&col);
    }
    let explained = [
        (values[0].max(0.0) / total).clamp(0.0, 1.0),
        (values[1].max(0.0) / total).clamp(0.0, 1.0),
    ];
    let basis = PcaBasis {
        mean,
        components,
        explained,
    };
    let coords = basis.project(x);
    Ok((basis, coords))
}
