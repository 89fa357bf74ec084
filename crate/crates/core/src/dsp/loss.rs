use crate::dsp::stft::{stft_magnitude_var, StftGeometry};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::scalar::Scalar;

/// STFT loss framing, in milliseconds so it follows the working sample rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftLossConfig {
    pub frame_shift_ms: f64,
    pub win_length_ms: f64,
    pub fft_size: usize,
    pub floor: f64,
}

impl Default for StftLossConfig {
    fn default() -> Self {
        Self { frame_shift_ms: 12.5, win_length_ms: 50.0, fft_size: 2048, floor: 1e-5 }
    }
}

impl StftLossConfig {
    /// Same framing in time with an FFT sized for 1 kHz audio.
    pub fn mini() -> Self {
        Self { fft_size: 64, ..Self::default() }
    }

    pub fn geometry(&self, sample_rate: u32) -> Result<StftGeometry> {
        let hop = (self.frame_shift_ms * sample_rate as f64 / 1000.0).round() as usize;
        let win = (self.win_length_ms * sample_rate as f64 / 1000.0).round() as usize;
        if !(hop >= 1 && hop < win && win <= self.fft_size) {
            return Err(Error::config(format!(
                "STFT loss at {sample_rate} Hz needs shift < window <= fft, got {hop} / {win} / {}",
                self.fft_size
            )));
        }
        StftGeometry::new(self.fft_size, win, hop)
    }
}

/// `‖|X| − |Y|‖_F + mean |log|X| − log|Y||` on graph variables holding signals.
pub fn stft_loss_var<'g, T: Scalar>(
    x: Var<'g, T>,
    y: Var<'g, T>,
    cfg: &StftLossConfig,
    sample_rate: u32,
) -> Result<Var<'g, T>> {
    if x.numel() != y.numel() {
        return Err(Error::shape(format!("STFT loss on {} vs {} samples", x.numel(), y.numel())));
    }
    let geom = cfg.geometry(sample_rate)?;
    let mx = stft_magnitude_var(x, geom)?;
    let my = stft_magnitude_var(y, geom)?;
    let spectral = mx.sub(my)?.norm2();
    let floor = T::of(cfg.floor);
    let log_term = mx.clamp_min(floor).ln().sub(my.clamp_min(floor).ln())?.abs().mean();
    spectral.add(log_term)
}

pub fn stft_loss<T: Scalar>(x: &AudioClip<T>, y: &AudioClip<T>, cfg: &StftLossConfig) -> Result<T> {
    if x.sample_rate != y.sample_rate {
        return Err(Error::shape(format!("sample rates {} vs {}", x.sample_rate, y.sample_rate)));
    }
    if x.samples.len() != y.samples.len() {
        return Err(Error::shape(format!("STFT loss on {} vs {} samples", x.samples.len(), y.samples.len())));
    }
    let g = Graph::new();
    let n = x.samples.len();
    let xv = g.constant(x.samples.clone(), &[n])?;
    let yv = g.constant(y.samples.clone(), &[n])?;
    Ok(stft_loss_var(xv, yv, cfg, x.sample_rate)?.item())
}
