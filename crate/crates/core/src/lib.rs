pub mod causality;
pub mod data;
pub mod error;
pub mod graphs;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod signal;
pub mod timeseries;
pub mod train;

pub use error::{Error, Result};
pub use numerics::Matrix;
pub use timeseries::TimeSeriesSet;
