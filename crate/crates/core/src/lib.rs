//! Gene-gene interaction detection for quantitative traits.

pub mod error;
pub mod exec;
pub mod genotype;
pub mod grouplasso;
pub mod interaction;
pub mod screen_clean;
pub mod simulation;
pub mod study;

pub use error::{EpistasisError, Result};
