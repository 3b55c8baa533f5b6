pub mod config;
pub mod error;
pub mod metrics;
pub mod reward;
pub mod scene_graph;
pub mod sim_rl;
pub mod similarity;

pub use error::{Error, Result};
