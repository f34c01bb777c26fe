pub mod backbone;
pub mod cma;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod hyperedge;
pub mod metrics;
pub mod model;
pub mod multiscale;
pub mod numerics;
pub mod plot;
pub mod prompts;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
