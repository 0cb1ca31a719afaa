//! Linear SVM and two-component PCA on two Gaussian blobs in 16 dimensions.
//!
//!     cargo run --release --example svm_and_pca

use fewshot_ot::downstream::{self, SvmConfig};
use fewshot_ot::evalharness::f1_scores;
use fewshot_ot::rng;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

fn main() -> fewshot_ot::Result<()> {
    let mut r = rng::stream(0, &[rng::tag("example.blobs")]);
    let n = 120;
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
    let x = Array2::from_shape_fn((n, 16), |(i, k)| {
        let z: f64 = StandardNormal.sample(&mut r);
        let shift = if k < 2 && labels[i] == 1 { 2.0 } else { 0.0 };
        z + shift
    });
    let (train, test) = (
        x.slice(ndarray::s![..80, ..]),
        x.slice(ndarray::s![80.., ..]),
    );
    let model = downstream::svm_train(train, &labels[..80], &SvmConfig::default())?;
    let pred = downstream::svm_predict(&model, test)?;
    let f = f1_scores(&pred, &labels[80..])?;
    println!(
        "held-out F1: stress {:.3}, no-stress {:.3}, macro {:.3}",
        f.stress, f.nostress, f.macro_f1
    );
    println!(
        "hinge objective {:.3} (zero model {:.3})",
        downstream::hinge_objective(train, &labels[..80], &model.weight, model.bias, model.c),
        downstream::hinge_objective(
            train,
            &labels[..80],
            &ndarray::Array1::zeros(16),
            0.0,
            model.c
        )
    );

    let (basis, coords) = downstream::pca_project(x.view())?;
    println!(
        "explained variance: pc1 {:.3}, pc2 {:.3}",
        basis.explained[0], basis.explained[1]
    );
    for class in [1u8, 0] {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        let mean1 = rows.iter().map(|&i| coords[[i, 0]]).sum::<f64>() / rows.len() as f64;
        println!("class {class}: mean pc1 {mean1:+.3}");
    }
    Ok(())
}
