pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod grid;
pub mod metrics;
pub mod net;
pub mod params;
pub mod scf;
pub mod ssw;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
