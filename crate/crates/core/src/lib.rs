pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gmad;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod train;

pub use error::{Error, Result};
