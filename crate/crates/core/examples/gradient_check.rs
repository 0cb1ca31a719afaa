//! Finite-difference check of the combined training objective: contrastive
//! loss plus a transport penalty under a frozen plan.
//!
//!     cargo run --release --example gradient_check

use fewshot_ot::selfcheck::{FrozenObjective, GradientCheck, FD_STEP};

fn main() -> fewshot_ot::Result<()> {
    let mut all = GradientCheck::default();
    for seed in 0..5 {
        let obj = FrozenObjective::toy(seed)?;
        let (value, _) = obj.value_and_grad(&obj.model)?;
        let check = obj.gradient_check(FD_STEP)?;
        println!(
            "instance {seed}: objective {value:.5}, {} entries, worst relative {:.2e}",
            check.entries, check.worst_relative
        );
        all.merge(&check);
    }
    println!(
        "overall: worst relative {:.2e}, worst tiny-entry absolute {:.2e}, passed {}",
        all.worst_relative,
        all.worst_small_absolute,
        all.passed()
    );
    Ok(())
}
