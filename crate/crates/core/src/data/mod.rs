//! Synthetic domains, sample transforms, batch samplers and dataset files.

pub mod augment;
pub mod io;
pub mod phenology;
pub mod sample;
pub mod sampler;

pub use augment::{shift_days, subsample_pixels, subsample_timesteps};
pub use io::{load_dataset, save_dataset};
pub use phenology::{
    generate_domain, phenology_value, target_domain_name, CalendarSpec, DomainSpec, PhenologyClassSpec, ScenarioSpec,
    UnknownSpec,
};
pub use sample::{Dataset, TimeSeriesSample, UNKNOWN_CLASS};
pub use sampler::{balanced_batches, BalancedSampler, UniformSampler};
