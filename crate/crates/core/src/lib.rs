//! Building blocks for separating mixtures of singing voices: signal
//! primitives, corpus manifests, dynamic mixture construction, training
//! objectives, oracle masks, and the evaluation harness.

pub mod audio;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod heuristic;
pub mod masks;
pub mod mixer;
pub mod objectives;
pub mod resample;
pub mod stft;

pub use audio::{loudness, read_wav, write_wav, AudioBuffer, WavFormat};
pub use error::{Error, Result};
pub use stft::{istft, stft, ComplexSpectrogram, StftConfig};
