//! Audio-visual fusion for continuous emotion recognition.
//!
//! Per-modality temporal convolutional encoders feed a Transformer encoder
//! over the concatenated sequence, followed by a task head for
//! valence/arousal regression, expression classification or action-unit
//! detection. Everything is differentiated by the small reverse-mode engine
//! in [`autograd`].

mod binio;

pub mod autograd;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod predictions;
pub mod task;
pub mod tcn;
pub mod tensor;
pub mod tnsr;
pub mod train;

pub use error::{Error, Result};
pub use task::Task;
pub use tensor::{Float, Precision, Tensor};
