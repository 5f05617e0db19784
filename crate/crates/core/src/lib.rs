//! Structural-consensus prototype learning with Kolmogorov-Arnold fusion for
//! semi-supervised 3D segmentation, at desk scale.

pub mod backbone;
pub mod checkpoint;
pub mod ckaf;
pub mod data;
pub mod error;
pub mod kan;
pub mod metrics;
pub mod numerics;
pub mod pcc;
pub mod ssd;
pub mod trainer;
pub mod verify;
pub mod volume;

pub use error::{Error, Result};
