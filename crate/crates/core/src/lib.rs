pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod image;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod sched;
pub mod tasks;
pub mod trainer;

pub use error::{CoreError, Result};

/// Default single-precision instantiations.
pub type Model = trainer::Model<f32>;
pub type ParamStore = params::ParamStore<f32>;
pub type Checkpoint = checkpoint::Checkpoint<f32>;

/// High-precision instantiations for gradient checks and audits.
pub type Model64 = trainer::Model<f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
