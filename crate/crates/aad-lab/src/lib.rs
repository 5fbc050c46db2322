//! Desk-scale auditory attention decoding lab on synthetic EEG.
//!
//! The crate covers the whole loop: audio-style envelope extraction
//! ([`signal`]), a linear forward model that synthesizes multi-channel EEG
//! from competing speech envelopes ([`synth`]), stimulus-reconstruction
//! decoders trained with correlation-based objectives ([`decoder`],
//! [`correlation`], [`train`]), on-disk trial bundles ([`dataset`]),
//! evaluation and significance testing ([`eval`]), and a resumable
//! experiment grid ([`experiment`]).

pub mod correlation;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod signal;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
