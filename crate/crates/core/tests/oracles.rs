//! Independent reference computations checked against the library.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use fewshot_ot::downstream::{self, SvmConfig};
use fewshot_ot::evalharness::f1_scores;
use fewshot_ot::numcore::{init_params, NetworkParams, TapGrads};
use fewshot_ot::otcore::{self, CostMatrix, Epsilon, SinkhornConfig};
use fewshot_ot::rng::{self, StreamRng};
use fewshot_ot::siamese::{self, PairData, PenaltyConfig, SiameseModel, Wiring};

fn gaussian(r: &mut StreamRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(r))
}

fn stream(name: &str, k: u64) -> StreamRng {
    rng::stream(k, &[rng::tag(name)])
}

fn euclid(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

/// Compares two gradients entry by entry: relative error where the reference
/// is above `1e-8` in magnitude, absolute otherwise.
fn assert_grad_close(analytic: &[f64], numeric: &[f64], rel: f64, abs: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        if scale < 1e-8 {
            assert!(
                (a - n).abs() <= abs,
                "entry {i}: analytic {a:e} numeric {n:e}"
            );
        } else {
            assert!(
                (a - n).abs() / scale <= rel,
                "entry {i}: analytic {a:e} numeric {n:e}"
            );
        }
    }
}

fn five_point_difference(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    let mut at = |i: usize, dx: f64, x: &mut Vec<f64>| {
        x[i] = theta[i] + dx;
        let v = f(x);
        x[i] = theta[i];
        v
    };
    (0..theta.len())
        .map(|i| {
            (at(i, -2.0 * h, &mut x) - 8.0 * at(i, -h, &mut x) + 8.0 * at(i, h, &mut x)
                - at(i, 2.0 * h, &mut x))
                / (12.0 * h)
        })
        .collect()
}

fn central_difference(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            x[i] = theta[i] + h;
            let up = f(&x);
            x[i] = theta[i] - h;
            let down = f(&x);
            x[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn cost_matrix_matches_double_loop() {
    let mut r = stream("oracle.cost", 0);
    let a = gaussian(&mut r, 4, 3);
    let b = gaussian(&mut r, 5, 3);
    let c = otcore::cost_matrix(a.view(), b.view()).unwrap();
    for i in 0..4 {
        for j in 0..5 {
            let mut s = 0.0;
            for k in 0..3 {
                s += (a[[i, k]] - b[[j, k]]).powi(2);
            }
            assert!((c.0[[i, j]] - s.sqrt()).abs() < 1e-14);
        }
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force_ot(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let n = a.nrows();
    permutations(n)
        .into_iter()
        .map(|p| (0..n).map(|i| euclid(a.row(i), b.row(p[i]))).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn sinkhorn_near_exact_optimum_on_small_sets() {
    let cfg = SinkhornConfig {
        epsilon: Epsilon::MedianFraction(1e-3),
        max_iterations: 20_000,
        tolerance: 1e-9,
    };
    for k in 0..20 {
        let mut r = stream("oracle.ot", k);
        let n = r.random_range(2..=6);
        let d = r.random_range(1..=4);
        let a = gaussian(&mut r, n, d);
        let b = gaussian(&mut r, n, d) + 0.5;
        let exact = brute_force_ot(a.view(), b.view());
        let (dist, plan) = otcore::sinkhorn(a.view(), b.view(), &cfg).unwrap();
        assert!(
            (dist - exact).abs() / exact <= 0.02,
            "instance {k}: {dist} vs {exact}"
        );
        // an infeasible plan can undercut the optimum by at most its mass error times the largest cost
        let max_cost = otcore::cost_matrix(a.view(), b.view())
            .unwrap()
            .0
            .fold(0.0f64, |m, &v| m.max(v));
        let slack = 2.0 * n as f64 * plan.marginal_violation * max_cost;
        assert!(
            dist >= exact - slack - 1e-12,
            "instance {k}: {dist} undercuts {exact} by more than {slack:e}"
        );
    }
}

#[test]
fn converged_plans_never_undercut_the_optimum() {
    let cfg = SinkhornConfig {
        max_iterations: 20_000,
        tolerance: 1e-12,
        ..SinkhornConfig::default()
    };
    let mut converged = 0;
    for k in 0..40 {
        let mut r = stream("oracle.bias", k);
        let n = r.random_range(2..=7);
        let d = r.random_range(1..=4);
        let a = gaussian(&mut r, n, d);
        let b = gaussian(&mut r, n, d);
        let (dist, plan) = otcore::sinkhorn(a.view(), b.view(), &cfg).unwrap();
        if plan.converged {
            converged += 1;
            assert!(
                dist >= brute_force_ot(a.view(), b.view()) - 1e-9,
                "instance {k}"
            );
        }
    }
    assert!(converged >= 20, "only {converged} of 40 converged");
}

#[test]
fn four_point_sets_in_the_plane() {
    let a = ndarray::array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let b = ndarray::array![[2.0, 0.5], [0.3, 2.0], [1.5, 1.5], [-1.0, 0.2]];
    let exact = brute_force_ot(a.view(), b.view());
    let cfg = SinkhornConfig {
        epsilon: Epsilon::MedianFraction(1e-3),
        max_iterations: 20_000,
        tolerance: 1e-9,
    };
    let (dist, plan) = otcore::sinkhorn(a.view(), b.view(), &cfg).unwrap();
    assert!(plan.converged);
    assert!((dist - exact).abs() / exact <= 0.02);
}

fn fixed_plan_cost(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, gamma: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            s += gamma[[i, j]] * euclid(a.row(i), b.row(j));
        }
    }
    s
}

#[test]
fn envelope_gradients_match_finite_differences() {
    let mut r = stream("oracle.envelope", 0);
    let a = gaussian(&mut r, 5, 3);
    let b = gaussian(&mut r, 4, 3);
    let (_, plan) = otcore::sinkhorn(a.view(), b.view(), &SinkhornConfig::default()).unwrap();
    let (ga, gb) = otcore::sinkhorn_embedding_grads(a.view(), b.view(), &plan).unwrap();

    let flat_a: Vec<f64> = a.iter().copied().collect();
    let num_a = central_difference(&flat_a, 1e-6, |x| {
        let aa = Array2::from_shape_vec(a.dim(), x.to_vec()).unwrap();
        fixed_plan_cost(aa.view(), b.view(), &plan.coupling)
    });
    assert_grad_close(ga.as_slice().unwrap(), &num_a, 1e-5, 1e-7);

    let flat_b: Vec<f64> = b.iter().copied().collect();
    let num_b = central_difference(&flat_b, 1e-6, |x| {
        let bb = Array2::from_shape_vec(b.dim(), x.to_vec()).unwrap();
        fixed_plan_cost(a.view(), bb.view(), &plan.coupling)
    });
    assert_grad_close(gb.as_slice().unwrap(), &num_b, 1e-5, 1e-7);
}

#[test]
fn envelope_gradient_of_point_masses() {
    let a = ndarray::array![[0.0]];
    let b = ndarray::array![[3.0]];
    let (d, plan) = otcore::sinkhorn(a.view(), b.view(), &SinkhornConfig::default()).unwrap();
    assert!((d - 3.0).abs() < 1e-12);
    let (ga, gb) = otcore::sinkhorn_embedding_grads(a.view(), b.view(), &plan).unwrap();
    assert!((ga[[0, 0]] + 1.0).abs() < 1e-12);
    assert!((gb[[0, 0]] - 1.0).abs() < 1e-12);
}

/// `Σ R_out ⊙ output + Σ R_emb ⊙ embedding`, evaluated without the library's backward pass.
fn tapped_loss(
    params: &NetworkParams,
    x: ArrayView2<'_, f64>,
    r_out: &Array2<f64>,
    r_emb: &Array2<f64>,
) -> f64 {
    let trace = params.forward(x).unwrap();
    (trace.output() * r_out).sum() + (trace.penultimate() * r_emb).sum()
}

#[test]
fn backward_matches_finite_differences_on_default_topology() {
    for k in 0..3 {
        let mut r = stream("oracle.backward", k);
        let params = init_params(k, &[91, 32, 16, 1]).unwrap();
        let x = gaussian(&mut r, 3, 91);
        let r_out = gaussian(&mut r, 3, 1);
        let r_emb = gaussian(&mut r, 3, 16);
        let trace = params.forward(x.view()).unwrap();
        let depth = trace.depth();
        let grads = params
            .backward(
                &trace,
                &TapGrads::new()
                    .at(depth, r_out.clone())
                    .at(depth - 1, r_emb.clone()),
            )
            .unwrap();
        let theta = params.flatten();
        let mut probe = params.clone();
        // central differences at 1e-5 lose ~1e-10 to rounding on a loss this size
        let numeric = five_point_difference(&theta, 1e-4, |t| {
            probe.set_flat(t).unwrap();
            tapped_loss(&probe, x.view(), &r_out, &r_emb)
        });
        assert_grad_close(&grads.flatten(), &numeric, 1e-4, 1e-6);
    }
}

fn toy_pairs(r: &mut StreamRng, n: usize, dim: usize) -> PairData {
    PairData {
        left: gaussian(r, n, dim),
        right: gaussian(r, n, dim),
        similarity: (0..n).map(|i| (i % 2) as u8).collect(),
    }
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    for wiring in [Wiring::ScoreDifference, Wiring::EmbeddingDifference] {
        for k in 0..4 {
            let mut r = stream("oracle.contrastive", k);
            let model = SiameseModel::new(k, &[6, 5, 3, 1], wiring).unwrap();
            let pairs = toy_pairs(&mut r, 6, 6);
            let (_, grads) = siamese::contrastive_loss(&model, &pairs).unwrap();
            let mut probe = model.clone();
            let numeric = central_difference(&model.params.flatten(), 1e-6, |t| {
                probe.params.set_flat(t).unwrap();
                siamese::contrastive_loss(&probe, &pairs).unwrap().0
            });
            assert_grad_close(&grads.flatten(), &numeric, 1e-4, 1e-6);
        }
    }
}

#[test]
fn penalty_gradient_matches_fixed_plan_differences() {
    for k in 0..4 {
        let mut r = stream("oracle.penalty", k);
        let model = SiameseModel::new(k, &[7, 6, 4, 1], Wiring::ScoreDifference).unwrap();
        let source = gaussian(&mut r, 5, 7);
        let target = gaussian(&mut r, 5, 7) + 0.4;
        let pen = siamese::wasserstein_penalty(
            &model,
            source.view(),
            target.view(),
            &PenaltyConfig::default(),
        )
        .unwrap();
        let mut probe = model.clone();
        let numeric = central_difference(&model.params.flatten(), 1e-6, |t| {
            probe.params.set_flat(t).unwrap();
            let ea = probe.embed(source.view()).unwrap();
            let eb = probe.embed(target.view()).unwrap();
            fixed_plan_cost(ea.view(), eb.view(), &pen.plan.coupling)
        });
        assert_grad_close(&pen.grads.flatten(), &numeric, 1e-4, 1e-6);
    }
}

/// Soft-margin objective minimised over a coarse lattice of `(w, b)` in the plane.
fn grid_search_svm(x: &Array2<f64>, y: &[f64], c: f64) -> (f64, f64, f64) {
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    for ti in 0..360 {
        let theta = (ti as f64).to_radians();
        for ri in 1..=60 {
            let rad = 0.1 * ri as f64;
            let (w0, w1) = (rad * theta.cos(), rad * theta.sin());
            for bi in -120..=120 {
                let b = 0.05 * bi as f64;
                let hinge: f64 = (0..x.nrows())
                    .map(|i| (1.0 - y[i] * (w0 * x[[i, 0]] + w1 * x[[i, 1]] + b)).max(0.0))
                    .sum();
                let obj = 0.5 * rad * rad + c * hinge;
                if obj < best.0 {
                    best = (obj, w0, w1, b);
                }
            }
        }
    }
    (best.1, best.2, best.3)
}

#[test]
fn svm_agrees_with_grid_search() {
    let mut r = stream("oracle.svm", 0);
    let n = 40;
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
    let y: Vec<f64> = labels
        .iter()
        .map(|&l| if l == 1 { 1.0 } else { -1.0 })
        .collect();
    let x = Array2::from_shape_fn((n, 2), |(i, k)| {
        let z: f64 = StandardNormal.sample(&mut r);
        let centre = if k == 0 { 1.2 * y[i] } else { 0.6 * y[i] };
        centre + z
    });
    let (w0, w1, b) = grid_search_svm(&x, &y, 1.0);
    let model = downstream::svm_train(x.view(), &labels, &SvmConfig::default()).unwrap();
    let pred = downstream::svm_predict(&model, x.view()).unwrap();
    let agree = (0..n)
        .filter(|&i| u8::from(w0 * x[[i, 0]] + w1 * x[[i, 1]] + b > 0.0) == pred[i])
        .count();
    assert!(agree as f64 / n as f64 >= 0.95, "agreement {agree}/{n}");
    let ours = downstream::hinge_objective(x.view(), &labels, &model.weight, model.bias, 1.0);
    let lattice =
        downstream::hinge_objective(x.view(), &labels, &Array1::from(vec![w0, w1]), b, 1.0);
    assert!(ours <= lattice + 1e-6, "{ours} vs lattice {lattice}");
}

fn reconstruction_error(centred: &Array2<f64>, basis: &Array2<f64>) -> f64 {
    // basis rows are orthonormal directions
    let proj = centred.dot(&basis.t()).dot(basis);
    (centred - &proj).iter().map(|v| v * v).sum()
}

#[test]
fn pca_matches_dense_eigensolver() {
    for k in 0..5 {
        let mut r = stream("oracle.pca", k);
        let x = gaussian(&mut r, 10, 16);
        let (basis, coords) = downstream::pca_project(x.view()).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        let centred = &x - &mean;

        let cov = centred.t().dot(&centred) / 9.0;
        let eig = SymmetricEigen::new(DMatrix::from_fn(16, 16, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..16).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let top = Array2::from_shape_fn((2, 16), |(c, i)| eig.eigenvectors[(i, order[c])]);
        let total: f64 = eig.eigenvalues.iter().sum();

        let ours = reconstruction_error(&centred, &basis.components);
        let theirs = reconstruction_error(&centred, &top);
        assert!((ours - theirs).abs() <= 1e-8, "{ours} vs {theirs}");
        for (c, &k) in order.iter().take(2).enumerate() {
            assert!((basis.explained[c] - eig.eigenvalues[k] / total).abs() <= 1e-9);
        }
        let expected = centred.dot(&basis.components.t());
        assert!((&coords - &expected).iter().all(|v| v.abs() < 1e-12));
    }
}

fn confusion_f1(pred: &[u8], truth: &[u8], positive: u8) -> f64 {
    let mut tp = 0;
    let mut fp = 0;
    let mut fneg = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    2.0 * precision * recall / (precision + recall)
}

#[test]
fn f1_matches_confusion_counts_exhaustively() {
    for len in 1..=6usize {
        for bits in 0u32..(1 << (2 * len)) {
            let pred: Vec<u8> = (0..len).map(|i| ((bits >> i) & 1) as u8).collect();
            let truth: Vec<u8> = (0..len).map(|i| ((bits >> (len + i)) & 1) as u8).collect();
            let got = f1_scores(&pred, &truth).unwrap();
            let s = confusion_f1(&pred, &truth, 1);
            let n = confusion_f1(&pred, &truth, 0);
            assert!((got.stress - s).abs() < 1e-12);
            assert!((got.nostress - n).abs() < 1e-12);
            assert!((got.macro_f1 - 0.5 * (s + n)).abs() < 1e-12);
        }
    }
}

#[test]
fn exact_ot_helper_agrees_with_brute_force() {
    let mut r = stream("oracle.exact", 0);
    for _ in 0..5 {
        let a = gaussian(&mut r, 5, 2);
        let b = gaussian(&mut r, 5, 2);
        let cost = CostMatrix(Array2::from_shape_fn((5, 5), |(i, j)| {
            euclid(a.row(i), b.row(j))
        }));
        let lib = fewshot_ot::selfcheck::exact_uniform_ot(&cost);
        assert!((lib - brute_force_ot(a.view(), b.view())).abs() < 1e-12);
    }
}
