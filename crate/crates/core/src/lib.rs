//! Few-shot metric learning for personalised stress classification.
//!
//! A Siamese network is trained on pairs formed between a target user's few
//! labelled samples and the closest samples from other users. Its embedding
//! is additionally pulled towards the target's unlabelled samples with an
//! entropic (Sinkhorn) Wasserstein penalty. The penalty is evaluated against
//! several hypothesised stress base rates and only the best-matching one is
//! minimised. A linear SVM on the learned embedding then labels the target's
//! unlabelled hours.
//!
//! Module map:
//!
//! - [`numcore`]: dense network, exact reverse-mode gradients, Adam.
//! - [`otcore`]: cost matrices, log-domain Sinkhorn, fixed-plan gradients.
//! - [`cohort`]: samples, CSV ingestion, synthetic cohorts, target splits.
//! - [`fewshot`]: nearest-neighbour pool selection, pairing, base-rate resampling.
//! - [`siamese`]: contrastive loss, Wasserstein penalty, training loop.
//! - [`downstream`]: linear SVM and two-component PCA.
//! - [`evalharness`]: leave-one-couple-out driver, F1 metrics, reports.
//! - [`cli`]: the `generate` / `run` / `plot` / `selfcheck` front end.
//!
//! Runnable walkthroughs live in `examples/`, one per capability.

pub mod cli;
pub mod cohort;
pub mod downstream;
pub mod error;
pub mod evalharness;
pub mod fewshot;
pub mod numcore;
pub mod otcore;
pub mod rng;
pub mod selfcheck;
pub mod siamese;

pub use error::{Error, Result};
