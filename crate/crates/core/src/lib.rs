//! Curation, augmentation and quality assessment of weak-teacher instance
//! masks over multiplex whole-slide images.

pub mod augment;
pub mod error;
pub mod filter;
pub mod io;
pub mod model_math;
pub mod numeric;
pub mod pipeline;
pub mod qa;
pub mod raster;
pub mod synth;
pub mod tiler;
pub mod w2s;

pub use error::{Error, Result};
