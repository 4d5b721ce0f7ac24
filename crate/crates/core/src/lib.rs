//! Spatio-temporal gaze estimation from eye and face video.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense tensors and a tape-based reverse-mode
//!   differentiation engine with finite-difference gradient checking.
//! * [`nn`]: convolutional encoders, channel attention, transformer blocks and
//!   the stacked GRU.
//! * [`model`]: the dual-stream network with its intra-frame scan and
//!   inter-frame state propagation.
//! * [`geometry`] and [`loss`]: gaze conventions, point-of-gaze projection,
//!   training loss and evaluation metrics.
//! * [`synth`]: a deterministic synthetic gaze-video generator and its on-disk format.
//! * [`train`]: Adam, cosine schedule, training and evaluation loops.
//! * [`gradsuite`]: gradient checks over every layer family.

pub mod autodiff;
mod binio;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Backward, Graph, OpKind, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
