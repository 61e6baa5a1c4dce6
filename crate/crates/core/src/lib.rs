//! Speech emotion recognition with frame-level multi-scale pseudo-labels.
//!
//! The pipeline runs in three stages:
//!
//! 1. [`stage1`]: multi-task (emotion + gender) training of an encoder with a
//!    BiLSTM pooling head.
//! 2. [`gmp`] extracts frame-level pseudo-labels with multi-scale k-means
//!    over a tapped encoder layer; [`stage2`] fine-tunes the encoder to
//!    predict them at masked frames.
//! 3. [`stage3`]: utterance-level fine-tuning with an additive-margin
//!    softmax head.
//!
//! [`eval`] provides WAR/UAR metrics and speaker-independent session
//! cross-validation; [`pipeline`] wires everything together and runs
//! ablation grids.

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod gmp;
pub mod kmeans;
pub mod params;
pub mod pipeline;
pub mod stage1;
pub mod stage2;
pub mod stage3;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
