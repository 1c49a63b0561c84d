//! Query-token audio codec.
//!
//! The codec patchifies a waveform into frame embeddings, interleaves learned
//! query tokens into the frame sequence, and quantizes only the query tokens
//! with a residual vector quantizer whose codebooks are frozen semantic
//! priors. Masked-autoencoding and a depth-wise autoregressive head act as
//! auxiliary objectives; training runs in two stages, the second adversarial.

pub mod audio;
pub mod checkpoint;
pub mod codestream;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod frontend;
pub mod interleave;
pub mod losses;
pub mod model;
pub mod nn;
pub mod quantizer;
pub mod spectral;
pub mod training;
pub mod transformer;

pub use error::{CodecError, Result};
