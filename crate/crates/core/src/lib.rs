pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod coupling;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod ode;
pub mod pointset;
pub mod process;
pub mod train;

pub use error::{Error, Result};
