//! Two-microphone sound-source direction-of-arrival estimation.
//!
//! The pipeline runs STFT log-magnitude/phase features through a ResNet
//! frontend with time/frequency feature-aggregation gates, a stack of
//! Stateformer layers (bidirectional Mamba+ state-space blocks combined with
//! squeeze-excitation Conformer components), and a head that emits a
//! Cartesian unit direction per source and frame. Training uses a
//! permutation-invariant MSE objective on synthetic moving-source scenes.

pub mod bench;
pub mod bimamba;
pub mod error;
pub mod fa_block;
pub mod features;
pub mod nn;
pub mod numerics;
pub mod scenegen;
pub mod seconformer;
pub mod stateformer;
pub mod training;
pub mod verify;
pub mod wav;

pub use error::{Error, Result};
