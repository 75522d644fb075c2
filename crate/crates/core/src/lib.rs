pub mod buffer;
pub mod edit;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod mirror;
pub mod model;
pub mod plane_estimation;
pub mod raster;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
