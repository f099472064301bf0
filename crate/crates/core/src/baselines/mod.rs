//! Comparison methods: k-nearest-neighbour averaging, a feed-forward
//! network on single-step features, and single-source AIREX models.

mod fnn;
mod knn;

pub use fnn::{fnn_forward, fnn_infer, fnn_init, fnn_train, FnnConfig, FnnLayout, FnnModel};
pub use knn::{knn_infer, knn_rmse, KnnConfig, StationReading};

use crate::data::Dataset;
use crate::error::Result;
use crate::training::{train, Split, TrainConfig, TrainMode, TrainOutcome};

/// Trains the degenerate one-city model: the split restricted to `city`,
/// β ≡ 1 and the final-output loss only.
pub fn train_single_source(dataset: &Dataset, split: &Split, city: &str, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut one = split.clone();
    one.train.retain(|c, _| c == city);
    if one.train.is_empty() {
        return Err(crate::Error::Invalid(format!("{city} is not a source city of the split")));
    }
    train(dataset, &one, &TrainConfig { mode: TrainMode::SingleSource, ..cfg.clone() })
}
