//! Pooled classifier trained on every other couple, scored on the held-out
//! couple: the inter-individual mismatch probe. Compares no shift with the
//! default shift.
//!
//!     cargo run --release --example mismatch_probe

use fewshot_ot::cli::{experiment, RunConfig};
use fewshot_ot::cohort::Mode;
use fewshot_ot::evalharness::{Variant, REFERENCE_VANILLA_MACRO};

fn main() -> fewshot_ot::Result<()> {
    for (label, shift, jitter) in [("no shift", 0.0, 0.0), ("default shift", 5.0, 2.0)] {
        let mut cfg = RunConfig::default();
        cfg.synth.shift = shift;
        cfg.synth.direction_jitter = jitter;
        cfg.experiment.modes = vec![Mode::FewShot];
        cfg.experiment.variants = vec![Variant::VanillaNn];
        cfg.experiment.seeds = (0..3).collect();
        let report = experiment(&cfg)?;
        let row = report
            .summary_for(Mode::FewShot, Variant::VanillaNn)
            .expect("vanilla row");
        println!(
            "{label:>13}: pooled macro-F1 {:.3} ± {:.3} over {} seeds",
            row.mean.macro_f1, row.std.macro_f1, row.seeds
        );
    }
    println!("reference value on the real cohort: {REFERENCE_VANILLA_MACRO}");
    Ok(())
}
