//! Object-centric scene decomposition with a learned energy over sets of
//! slot latents. Inference draws latents by Langevin dynamics on the
//! energy; a spatial broadcast decoder renders them back to an image.

pub mod checkpoint;
pub mod datasets;
pub mod decoder;
pub mod encoder;
pub mod evaluation;
pub mod energy;
mod error;
pub mod model;
pub mod params;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
pub use params::{positional_grid, Params};
pub use slotenergy_autograd as autograd;
