pub mod analysis;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod guidance;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod patch_mask;
pub mod sweep;
pub mod synthdata;
pub mod trainer;

pub use error::{Result, SgError};
