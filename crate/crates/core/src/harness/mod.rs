//! Experiment harness: synthetic data, augmentation, training, evaluation,
//! checkpoints and ablation sweeps.

pub mod ablate;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ablate::{run_sweep, run_variants, Sweep, SweepResult, Variant};
pub use augment::{augment, augment_seeded};
pub use checkpoint::Checkpoint;
pub use config::{AugmentSpec, DatasetSpec, TrainConfig};
pub use data::{generate_synthetic, DatasetBundle, OodSet};
pub use evaluate::{evaluate, export_embeddings, layer_features, ScoreReport};
pub use train::{train, train_with_observer, EpochMetrics, TrainOutcome};

/// Independent generator `stream` of the ChaCha8 sequence for `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
