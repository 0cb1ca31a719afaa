//! Trains the Siamese network on one few-shot fold under each loss variant and
//! prints the per-epoch loss breakdown.
//!
//!     cargo run --release --example train_siamese

use fewshot_ot::cohort::{self, Mode, SplitOutcome, SynthConfig};
use fewshot_ot::fewshot;
use fewshot_ot::siamese::{
    self, LossBreakdown, LossVariant, SiameseModel, TrainConfig, TrainInputs, Wiring,
};

fn main() -> fewshot_ot::Result<()> {
    let c = cohort::generate_cohort(&SynthConfig::default())?;
    let target = c
        .couple_ids()
        .next()
        .expect("cohort has couples")
        .to_owned();
    let SplitOutcome::Ready(split) = cohort::split_target(&c, &target, Mode::FewShot)? else {
        unreachable!("generated couples are eligible")
    };
    let selected = fewshot::select_closest(&split.pool, &split.labelled, 256)?;
    let inputs = TrainInputs {
        selected: &selected,
        anchors: &split.labelled,
        unlabelled: split.unlabelled.view(),
    };
    let truth =
        split.withheld.iter().filter(|&&l| l == 1).count() as f64 / split.withheld.len() as f64;
    println!("target {target}: true stressed share of the unlabelled hours {truth:.2}");

    for variant in [
        LossVariant::Baseline1,
        LossVariant::Baseline2,
        LossVariant::Proposed,
    ] {
        let cfg = TrainConfig {
            epochs: 10,
            variant,
            seed: 1,
            ..TrainConfig::default()
        };
        let model = SiameseModel::new(7, &[c.dim(), 32, 16, 1], Wiring::ScoreDifference)?;
        let out = siamese::train_snn(model, &inputs, &cfg, &target, false)?;
        println!("\n{}", variant.as_str());
        println!("{}", LossBreakdown::CSV_HEADER);
        for row in &out.log {
            println!("{}", row.csv_row(&target, variant));
        }
    }
    Ok(())
}
