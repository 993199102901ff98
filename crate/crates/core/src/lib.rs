pub mod cca;
pub mod error;
pub mod gate;
pub mod harness;
pub mod heads;
pub mod hourglass;
pub mod landmarks;
pub mod layers;
pub mod metrics;
pub mod numerics;

pub use error::{Error, Result};
