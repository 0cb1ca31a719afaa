//! One leave-one-couple-out split: nearest-neighbour selection from the other
//! couples, pair formation and base-rate resampling.
//!
//!     cargo run --release --example select_and_pair

use fewshot_ot::cohort::{self, Mode, SplitOutcome, SynthConfig};
use fewshot_ot::fewshot;
use fewshot_ot::rng;

fn main() -> fewshot_ot::Result<()> {
    let c = cohort::generate_cohort(&SynthConfig::default())?;
    let target = c
        .couple_ids()
        .nth(3)
        .expect("cohort has couples")
        .to_owned();
    for mode in [Mode::FewShot, Mode::OneShot] {
        let SplitOutcome::Ready(split) = cohort::split_target(&c, &target, mode)? else {
            continue;
        };
        let n = if mode == Mode::FewShot { 256 } else { 128 };
        let selected = fewshot::select_closest(&split.pool, &split.labelled, n)?;
        let mut r = rng::stream(0, &[rng::tag("example.pairs")]);
        let pairs = fewshot::make_pairs(&selected, &split.labelled, &mut r)?;
        let dissimilar = pairs.pairs.iter().filter(|p| p.similarity == 1).count();
        println!(
            "{mode} on {target}: {} anchors ({} stressed), {} unlabelled, {} selected ({} stressed), {} pairs ({dissimilar} dissimilar)",
            split.labelled.len(),
            split.labelled.class_count(1),
            split.unlabelled.nrows(),
            selected.len(),
            selected.set.class_count(1),
            pairs.len()
        );
        let labelled = split.labelled.concat(&selected.set)?;
        for p in [0.05, 0.5, 0.95] {
            match fewshot::resample_base_rate(&labelled, p, split.unlabelled.nrows(), &mut r) {
                Ok(s) => println!(
                    "  rate {p}: drew {} rows, realised stressed share {:.3}",
                    s.set.len(),
                    s.realized_rate
                ),
                Err(e) => println!("  rate {p}: {e}"),
            }
        }
    }
    Ok(())
}
