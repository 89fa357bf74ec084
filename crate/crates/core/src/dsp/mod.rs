//! Audio front end: STFT, log-mel / log-linear features, frame reduction,
//! the STFT training loss and Griffin-Lim reconstruction.

pub mod frames;
pub mod griffin_lim;
pub mod loss;
pub mod mel;
pub mod stft;
pub mod wav;

pub use frames::{expand_frames, reduce_frames, ReducedFrames};
pub use griffin_lim::griffin_lim;
pub use loss::{stft_loss, stft_loss_var, StftLossConfig};
pub use mel::{features, linear_spectrogram, mel_spectrogram, MelFilterbank, SpectrogramConfig};
pub use stft::{hann, stft_magnitude, stft_magnitude_var, StftGeometry};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> AudioClip<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecKind {
    Mel,
    Linear,
}

/// Log-magnitude spectrogram stored `frames x bins`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T> {
    pub values: Vec<T>,
    pub frames: usize,
    pub bins: usize,
    pub kind: SpecKind,
    pub hop: usize,
    pub win_length: usize,
    pub fft_size: usize,
    pub sample_rate: u32,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn new(values: Vec<T>, frames: usize, bins: usize, kind: SpecKind, cfg: &SpectrogramConfig) -> Result<Self> {
        if values.len() != frames * bins {
            return Err(Error::shape(format!("{} values for {frames} x {bins} spectrogram", values.len())));
        }
        Ok(Self {
            values,
            frames,
            bins,
            kind,
            hop: cfg.hop,
            win_length: cfg.win_length,
            fft_size: cfg.fft_size,
            sample_rate: cfg.sample_rate,
        })
    }

    pub fn row(&self, frame: usize) -> &[T] {
        &self.values[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn reduce(&self, r: usize) -> Result<ReducedFrames<T>> {
        reduce_frames(&self.values, self.frames, self.bins, r)
    }
}
