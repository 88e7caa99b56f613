//! Spectral-temporal activity recognition engine.
//!
//! Pipeline: per-channel STFT magnitudes, a depthwise separable conv block,
//! channel self-attention, a projected bidirectional GRU with attention
//! pooling, and a softmax classifier. Around it: training with manual
//! backpropagation, post-training INT8 quantization, parameter/MAC
//! accounting, IMU windowing and a latency benchmark harness.

pub mod bench;
pub mod cli;
pub mod config;
pub mod costs;
pub mod data;
pub mod error;
pub mod format;
pub mod layers;
pub mod model;
pub mod quant;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{FormatError, Result, SpectraError};
pub use tensor::{Rng, Tensor};
