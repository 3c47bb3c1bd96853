pub mod checkpoint;
pub mod cli;
pub mod compositor;
pub mod config;
pub mod data;
pub mod detection;
pub mod engine;
pub mod error;
pub mod eval;
pub mod matching;
pub mod model;
pub mod params;
pub mod sampler;
pub mod semantic;
pub mod tape;

pub use error::{Error, Result};
