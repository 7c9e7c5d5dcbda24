pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod spatial;
pub mod store;
pub mod training;

pub use error::{Error, Result};
