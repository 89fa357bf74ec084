//! Convolutional sequence-to-sequence models: the autoregressive teacher and
//! the non-autoregressive ParaNet, with their training objectives.

mod ablation;
mod config;
mod encoder;
mod paranet;
mod teacher;
mod train;

use std::collections::BTreeMap;

pub use ablation::{ablation_suite, evaluate_alignment, train_paranet, AblationConfig, AblationResult, AblationVariant};
pub use config::{EncoderConfig, ModelConfig, ParaNetConfig, TeacherConfig};
pub use encoder::{Encoder, EncoderOutput};
pub use paranet::{ParaNet, ParaNetOutput};
pub use teacher::{DecoderOutput, Teacher, TeacherOutput};
pub use train::{
    masked_l1, paranet_loss, paranet_train_step, paranet_train_step_with, teacher_alignment, teacher_loss,
    teacher_train_step, to_spectrogram, Example, ParaNetLosses, SpecNorm, TeacherLosses,
};

use crate::attention::AlignmentMatrix;
use crate::dsp::ReducedFrames;
use crate::error::Result;
use crate::nn::{Module, Var};
use crate::scalar::Scalar;

/// Floor applied to magnitudes before the log; also fixes [`SpecNorm`].
pub const SPEC_FLOOR: f64 = 1e-5;

/// `(h + x) * sqrt(0.5)`
pub fn residual<'g, T: Scalar>(h: Var<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(h.add(x)?.scale(T::of(0.5f64.sqrt())))
}

/// Decoder steps for `m` tokens at `rate` reduced steps per token.
pub fn synthesis_steps(m: usize, rate: f64) -> usize {
    // the epsilon keeps exact products like 1.575 * 40 from rounding up
    (rate * m as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Result of inference: reduced spectrogram frames and alignments.
#[derive(Debug, Clone)]
pub struct Synthesis<T> {
    pub mel: ReducedFrames<T>,
    pub linear: ReducedFrames<T>,
    pub alignments: Vec<AlignmentMatrix<T>>,
    pub decoder_invocations: usize,
    /// Set when the step budget cut synthesis short.
    pub truncated: bool,
}

impl<T> Synthesis<T> {
    pub fn steps(&self) -> usize {
        self.mel.steps
    }
}

/// Parameter counts grouped by the first `depth` components of their names.
pub fn parameter_breakdown<T: Scalar, M: Module<T>>(model: &M, depth: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, t| {
        let key: Vec<&str> = name.split('.').take(depth.max(1)).collect();
        *out.entry(key.join(".")).or_insert(0) += t.numel();
    });
    out
}
