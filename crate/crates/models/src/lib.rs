//! Neural components of the span-editing pipeline: the RVQ codec, the
//! watermarking context-aware decoder, the causal token model, span
//! generation and model-based evaluation.

pub mod ar;
pub mod ar_train;
pub mod codec;
pub mod codec_train;
pub mod engine;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod watermark;

pub use ar::{ArConfig, ArModel};
pub use codec::{Codec, CodecConfig, LatentFrames, Rvq};
pub use error::{ModelError, Result};
pub use watermark::{WmCodec, WmConfig};
