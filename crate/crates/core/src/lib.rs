//! Pure building blocks for span-based speech editing: token grids, the
//! context-then-spans layout with delayed codebook stacking, edit planning
//! from word alignments, guided nucleus sampling, watermark bits, corpus IO
//! and objective metrics.
//!
//! Nothing here depends on a tensor backend; the neural models live in
//! `spanedit-models`.

pub mod audio;
pub mod corpus;
pub mod error;
pub mod grid;
pub mod layout;
pub mod metrics;
pub mod planner;
pub mod sampling;
pub mod watermark;

pub use audio::Waveform;
pub use error::{Error, Result};
pub use grid::{CodeGrid, TokenGrid};
pub use layout::{RearrangedSeq, Role, Span, SpanSet, SpecialVocab};
pub use planner::{PhonemeInventory, PhonemeSeq, WordAlignment};
pub use sampling::{CfgParams, SamplerParams, StopReason};
pub use watermark::{MaskedWaveform, WatermarkSeq};
