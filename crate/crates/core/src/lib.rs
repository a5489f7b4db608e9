//! Self-distilled self-supervised representation learning on a small
//! vision transformer, with multi-exit evaluation and representation
//! geometry metrics.

pub mod ablate;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod framework;
pub mod heads;
pub mod losses;
pub mod optim;
pub mod params;
pub mod schedules;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
