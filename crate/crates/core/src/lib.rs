//! Part-whole relational fusion of multi-modal image features with capsule
//! routing, plus the segmentation and saliency heads built on top of it.

pub mod backbone;
pub mod config;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod smm;
pub mod tensor;
pub mod vdt;

pub use config::{PipelineConfig, Task};
pub use error::{Error, Result};
