pub mod clt_oracle;
pub mod empirical;
pub mod error;
pub mod experiments;
pub mod fluctuation_field;
pub mod model_lq;
pub mod numeric;
pub mod particle_systems;
pub mod stats;
pub mod stochastic_kernel;

pub use error::{Error, Result};
