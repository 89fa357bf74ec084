//! Non-autoregressive convolutional text-to-spectrogram synthesis with an
//! autoregressive teacher, attention distillation and a flow-based waveform VAE.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`). The aliases at
//! the crate root fix the scalar to `f64`, which is what training, gradient
//! checks and the CLI use.

pub mod attention;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod export;
pub mod nn;
pub mod scalar;
pub mod seq2seq;
pub mod wavevae;
pub mod text;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = nn::Tensor<f64>;
pub type Graph = nn::Graph<f64>;
pub type OptimizerState = nn::OptimizerState<f64>;
pub type ConvBlock = nn::ConvBlock<f64>;
pub type AudioClip = dsp::AudioClip<f64>;
pub type Spectrogram = dsp::Spectrogram<f64>;
pub type Utterance = text::Utterance<f64>;
pub type AlignmentMatrix = attention::AlignmentMatrix<f64>;
pub type AttentionBlock = attention::AttentionBlock<f64>;
pub type Teacher = seq2seq::Teacher<f64>;
pub type ParaNet = seq2seq::ParaNet<f64>;
pub type Example = seq2seq::Example<f64>;
pub type Synthesis = seq2seq::Synthesis<f64>;
pub type WaveVae = wavevae::WaveVae<f64>;
