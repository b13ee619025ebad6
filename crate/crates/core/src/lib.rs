pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod ftg;
pub mod language;
pub mod model;
pub mod nn;
pub mod optim;
pub mod patch;
pub mod protocol;
pub mod render;
pub mod spa;
pub mod srm;
pub mod synthetic;
pub mod taxonomy;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
