pub mod error;
pub mod harness;
pub mod numeric;
pub mod policy;
pub mod reward;
pub mod segmentation;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};
