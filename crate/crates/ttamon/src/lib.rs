//! Synthetic streams, a toy adapting classifier and the experiment runner
//! around the `ttamon-core` monitor.

pub mod acceptance;
pub mod config;
mod error;
pub mod output;
pub mod presets;
pub mod runner;
pub mod simulator;

pub use error::SimError;
