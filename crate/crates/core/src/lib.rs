//! Transcript-sorting video pre-training at desk scale.
//!
//! Shuffled timestamped transcripts are put back in order by a small
//! transformer that attends to a masked space-time video encoding. The
//! crate carries everything needed to run that end to end on a CPU: a
//! reverse-mode autodiff tape, a procedural narrated-video corpus, the
//! encoders and sort heads, the contrastive and sort objectives, a
//! deterministic trainer, and retrieval / linear-probe evaluation.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod sortformer;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use numerics::{Tape, Tensor};
pub use params::ParamStore;
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
