//! File formats, configuration and the evaluation harness around
//! `attrib-core`.

pub mod cifar;
pub mod config;
pub mod error;
pub mod harness;
pub mod manifest;
pub mod maps;
pub mod ppm;
pub mod single;

pub use error::{Error, Result};
pub use harness::{run_evaluation, write_report, Rayon, RunReport};
