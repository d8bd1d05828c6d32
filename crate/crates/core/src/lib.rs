//! Streaming multi-talker speech recognition with a factorized neural
//! transducer, end to end at desk scale.
//!
//! Multi-speaker transcripts are serialized into a single chronological token
//! stream with channel-change markers, recognized by a transducer whose
//! vocabulary prediction path is an explicit language model. That
//! factorization keeps the vocabulary predictor adaptable from text alone.
//! Everything needed to exercise the idea lives here: a minimal reverse-mode
//! tensor engine, the model, transducer and LM losses, beam decoding with
//! channel splitting, multi-talker WER scoring, and a synthetic
//! overlapped-speech corpus generator, orchestrated by the [`driver`] module
//! behind the `tsotfnt` CLI.

pub mod decoding;
pub mod driver;
pub mod error;
pub mod labels;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};
