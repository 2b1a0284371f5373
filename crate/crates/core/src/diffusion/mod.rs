//! Noise schedule, training objective and sampler.

pub mod sampler;
pub mod schedule;
pub mod train;

pub use sampler::{cfg_combine, chain_rng, sample, sample_raw, EpsPredictor, Guidance, SampleSpec};
pub use schedule::{make_schedule, DiffusionSchedule, ScheduleConfig};
pub use train::{
    collate, noise_batch, prediction_loss, smoothed, train_loop, train_step, training_loss, AdamW,
    MetricLog, NoisedBatch, PeriodicCheckpoint, TrainCallback, TrainConfig, TrainState,
};
