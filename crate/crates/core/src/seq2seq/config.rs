use crate::attention::{ContextScale, PositionRates};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub encoder: EncoderConfig,
    /// Affine+ReLU sizes after the 1x1 input convolution; the last is the decoder width.
    pub prenet: Vec<usize>,
    pub decoder_layers: usize,
    pub decoder_width: usize,
    pub converter_layers: usize,
    pub converter_width: usize,
    pub keep: f64,
}

impl TeacherConfig {
    pub fn hidden(&self) -> usize {
        *self.prenet.last().expect("validated prenet")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParaNetConfig {
    pub encoder: EncoderConfig,
    /// Attention blocks in the decoder (L); L - 1 conv blocks sit between them.
    pub decoder_layers: usize,
    pub decoder_width: usize,
    pub hidden: usize,
    pub keep: f64,
    pub use_positional_encoding: bool,
    /// Coefficient of the attention distillation term.
    pub distill_weight: f64,
}

/// Hyperparameters shared by the teacher and ParaNet.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub reduction: usize,
    pub mel_bins: usize,
    pub linear_bins: usize,
    pub attention_hidden: usize,
    /// Mean spectrogram frames per text token (before reduction).
    pub frames_per_token: f64,
    /// Rate of the query (decoder-side) positional encodings.
    pub position_weight: f64,
    pub context_scale: ContextScale,
    /// Start query and key projections from identical weights so that the
    /// positional encodings alone produce a diagonal alignment at init.
    pub tie_projection_init: bool,
    pub teacher: TeacherConfig,
    pub paranet: ParaNetConfig,
}

impl ModelConfig {
    /// The published hyperparameters.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embedding_dim: 256,
            reduction: 4,
            mel_bins: 80,
            linear_bins: 1025,
            attention_hidden: 128,
            frames_per_token: 6.3,
            position_weight: 1.0,
            context_scale: ContextScale::default(),
            tie_projection_init: true,
            teacher: TeacherConfig {
                encoder: EncoderConfig { layers: 7, width: 5, channels: 64 },
                prenet: vec![128, 256],
                decoder_layers: 4,
                decoder_width: 5,
                converter_layers: 5,
                converter_width: 5,
                keep: 0.95,
            },
            paranet: ParaNetConfig {
                encoder: EncoderConfig { layers: 7, width: 9, channels: 64 },
                decoder_layers: 17,
                decoder_width: 7,
                hidden: 256,
                keep: 1.0,
                use_positional_encoding: true,
                distill_weight: 4.0,
            },
        }
    }

    /// Desk-scale preset for 1 kHz audio with 16 mel bands.
    pub fn mini(vocab_size: usize) -> Self {
        let full = Self::full(vocab_size);
        Self {
            embedding_dim: 64,
            mel_bins: 16,
            linear_bins: 33,
            attention_hidden: 64,
            teacher: TeacherConfig {
                encoder: EncoderConfig { layers: 3, width: 5, channels: 32 },
                prenet: vec![32, 64],
                converter_layers: 2,
                ..full.teacher
            },
            paranet: ParaNetConfig {
                encoder: EncoderConfig { layers: 3, width: 9, channels: 32 },
                decoder_layers: 4,
                hidden: 64,
                ..full.paranet
            },
            ..full
        }
    }

    pub fn rates(&self) -> PositionRates {
        PositionRates { frames_per_token: self.frames_per_token, reduction: self.reduction }
    }

    pub fn mel_width(&self) -> usize {
        self.reduction * self.mel_bins
    }

    pub fn linear_width(&self) -> usize {
        self.reduction * self.linear_bins
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("reduction", self.reduction),
            ("mel_bins", self.mel_bins),
            ("linear_bins", self.linear_bins),
            ("attention_hidden", self.attention_hidden),
            ("teacher.decoder_layers", self.teacher.decoder_layers),
            ("paranet.decoder_layers", self.paranet.decoder_layers),
            ("paranet.hidden", self.paranet.hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        for (name, e) in [("teacher", self.teacher.encoder), ("paranet", self.paranet.encoder)] {
            if e.channels == 0 || e.width == 0 || e.width % 2 == 0 {
                return Err(Error::config(format!("{name} encoder needs positive channels and an odd width")));
            }
        }
        if self.teacher.prenet.is_empty() || self.teacher.prenet.contains(&0) {
            return Err(Error::config("teacher prenet sizes must be non-empty and positive"));
        }
        if self.paranet.decoder_width.is_multiple_of(2) || self.teacher.converter_width.is_multiple_of(2) {
            return Err(Error::config("non-causal widths must be odd"));
        }
        if self.teacher.decoder_width == 0 {
            return Err(Error::config("teacher decoder width must be positive"));
        }
        for keep in [self.teacher.keep, self.paranet.keep] {
            if !(keep > 0.0 && keep <= 1.0) {
                return Err(Error::config(format!("dropout keep probability {keep} outside (0, 1]")));
            }
        }
        if !self.embedding_dim.is_multiple_of(2) || !self.teacher.hidden().is_multiple_of(2) || !self.paranet.hidden.is_multiple_of(2) {
            return Err(Error::config("positional encodings need even channel counts"));
        }
        if !(self.frames_per_token > 0.0) {
            return Err(Error::config("frames per token must be positive"));
        }
        if !(self.position_weight > 0.0 && self.position_weight.is_finite()) {
            return Err(Error::config("position weight must be positive"));
        }
        if !(self.paranet.distill_weight >= 0.0) {
            return Err(Error::config("distillation weight must be non-negative"));
        }
        Ok(())
    }
}
