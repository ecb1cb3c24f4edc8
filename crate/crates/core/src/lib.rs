//! Desk-scale semi-supervised joint text-to-speech / speech-recognition
//! training on a fully synthetic phoneme corpus.
//!
//! The crate builds three small sequence models from scratch — a transformer
//! recognizer, a parallel synthesizer with explicit pitch/energy/duration
//! prediction, and a frozen speaker embedder — and couples them through a
//! synthesis-then-recognition cycle so unpaired text can train the
//! recognizer. Everything runs on the CPU in `f64` with deterministic
//! seeding, small enough to train and evaluate inside the test suite.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod asr;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod params;
pub mod speaker;
pub mod train;
pub mod tts;

pub use error::{Error, Result};
