//! Full leave-one-couple-out comparison of the three Siamese variants on the
//! default synthetic cohort. Extra arguments are `key=value` config overrides.
//!
//!     cargo run --release --example loco_experiment -- seeds=0,1,2 modes=few-shot

use fewshot_ot::cli::{experiment, macro_deltas, RunConfig};
use fewshot_ot::evalharness::Variant;

fn main() -> fewshot_ot::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::from_toml("", &overrides)?;
    let report = experiment(&cfg)?;
    print!("{}", report.text_table());
    for (mode, d) in macro_deltas(&report, Variant::Proposed, Variant::Baseline1) {
        println!(
            "{mode}: proposed - baseline1 = {:+.1} macro-F1 points",
            100.0 * d
        );
    }
    if !report.skipped.is_empty() {
        println!("{} folds skipped", report.skipped.len());
    }
    Ok(())
}
