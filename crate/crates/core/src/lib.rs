//! Wavelet-coefficient tokenization of small grayscale images.
//!
//! The pipeline runs image → DWT coefficients → bit-plane token sequence,
//! and back. On top of the token sequences sit a conditional next-token
//! model with constrained generation and a BPE compressor.

pub mod bpe;
pub mod codec;
pub mod dataset;
pub mod dwt;
pub mod features;
pub mod layout;
pub mod model;
