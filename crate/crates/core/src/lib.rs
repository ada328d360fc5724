//! Online continual learning with experience replay, CutMix augmentation,
//! multi-scale feature distillation and a task-count-scheduled meta update.
//!
//! The crate is organised bottom-up: [`tensor`] provides the numeric value
//! type and a reverse-mode tape, [`network`] the small convolutional
//! classifier, and the remaining modules the continual-learning machinery
//! that [`harness`] wires into complete runs.

pub mod batch;
pub mod checkpoint;
pub mod cutmix;
pub mod distill;
pub mod error;
pub mod harness;
pub mod loss;
pub mod memory;
pub mod meta;
pub mod metrics;
pub mod network;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};

/// Deterministic generator for one purpose (`stream`) under a run seed.
pub fn rng_stream(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
