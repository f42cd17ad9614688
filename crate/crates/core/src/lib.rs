//! Scene-graph classification by iterative schema assimilation.

pub mod checkpoint;
pub mod data;
mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod schema;
pub mod srg;
pub mod synth;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
