//! Count alignment, pixel Fréchet distance and guidance sweeps.

mod counter;
mod frechet;
mod metrics;
mod sweep;

pub use counter::{color_mask, component_areas, count_shapes, COLOR_CUTOFF, MIN_AREA};
pub use frechet::{frechet_from_features, pixel_frechet, pooled_features, FrechetResult, POOL_GRID, REGULARIZER};
pub use metrics::{avg_error, match_ratio, CountGroup, CountResult, CountSample};
pub use sweep::{
    cfg_sweep, count_groups_csv, count_table_csv, evaluate_counts, generate, prompt_grid, sweep_csv,
    GenerateSpec, Prompt, SweepRow,
};
