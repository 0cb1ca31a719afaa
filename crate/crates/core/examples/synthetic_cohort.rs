//! Generates a synthetic cohort, prints its base-rate spread and writes it in
//! the ingestion CSV format.
//!
//!     cargo run --release --example synthetic_cohort -- /tmp/cohort.csv

use fewshot_ot::cli::describe_cohort;
use fewshot_ot::cohort::{self, LoadOptions, SynthConfig};

fn main() -> fewshot_ot::Result<()> {
    let cfg = SynthConfig::default();
    let c = cohort::generate_cohort(&cfg)?;
    print!("{}", describe_cohort(&c));

    let mut rates: Vec<f64> = c.base_rates().into_iter().map(|(_, r)| r).collect();
    rates.sort_by(f64::total_cmp);
    let bins = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.01];
    for w in bins.windows(2) {
        let n = rates.iter().filter(|&&r| r >= w[0] && r < w[1]).count();
        println!(
            "base rate [{:.1}, {:.1}): {}",
            w[0],
            w[1].min(1.0),
            "#".repeat(n)
        );
    }

    if let Some(path) = std::env::args().nth(1) {
        cohort::write_csv(&c, path.as_ref())?;
        let back = cohort::load_csv(path.as_ref(), LoadOptions::default())?;
        println!(
            "wrote {path}; reloaded {} samples, identical: {}",
            back.len(),
            back == c
        );
    }
    Ok(())
}
