//! Part-aware person re-identification: three-stream feature extraction
//! (global, part, head), training losses, pseudo part labels and retrieval
//! evaluation on top of a small reverse-mode autodiff tensor library.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod part;
pub mod pseudo;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, OptimizerKind, RunConfig, StreamSet};
pub use error::{PahError, Result};
pub use parallel::Exec;
pub use tensor::Tensor;
