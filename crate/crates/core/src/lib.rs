//! Missing-modality prompt learning on a frozen two-stream transformer.

pub mod archive;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod metrics;
pub mod modality;
pub mod nn;
pub mod optim;
pub mod prompts;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
