//! Losses, critic, masks and the alternating training loop.

pub mod dataset;
pub mod discriminator;
pub mod losses;
pub mod masks;
pub mod optim;
pub mod trainer;

pub use dataset::Dataset;
pub use discriminator::Discriminator;
pub use losses::LossWeights;
pub use masks::{generate_mask, MaskMode, MaskSpec};
pub use optim::{Adam, AdamConfig};
pub use trainer::{train, EvalSet, StepRecord, TrainSummary, Trainer, TrainingConfig, Update};
