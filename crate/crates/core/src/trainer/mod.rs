//! Synthetic bag data, the optimizer and the training loop.

pub mod adam;
pub mod synthetic;
mod train;

pub use adam::{adam_step, adam_update, AdamState};
pub use synthetic::{
    generate_synthetic_bags, nearest_centroid_accuracy, Bag, Dataset, SyntheticBagConfig, SyntheticSplits,
};
pub use train::{
    evaluate, sampling_baseline, slot_budget_sweep, train, EpochRecord, Evaluation, SamplingBaselineConfig, SweepRow,
    TrainConfig, TrainOutcome, TrainReport, TrainStatus,
};
