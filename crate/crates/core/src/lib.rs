pub mod augment;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod losses;
pub mod renderer;
mod rng;
pub mod trigger;
pub mod uapgd;

pub use error::{Error, Result};
