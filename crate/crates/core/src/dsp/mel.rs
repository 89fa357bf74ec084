use crate::dsp::stft::{Stft, StftGeometry};
use crate::dsp::{AudioClip, SpecKind, Spectrogram};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Feature extraction settings. Defaults are the 24 kHz / 2048 / 1200 / 300 / 80-band setup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub win_length: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self { sample_rate: 24_000, fft_size: 2048, win_length: 1200, hop: 300, n_mels: 80, floor: 1e-5 }
    }
}

impl SpectrogramConfig {
    /// Small-scale features for 1 kHz synthetic audio.
    pub fn mini() -> Self {
        Self { sample_rate: 1000, fft_size: 64, win_length: 50, hop: 10, n_mels: 16, floor: 1e-5 }
    }

    pub fn geometry(&self) -> Result<StftGeometry> {
        StftGeometry::new(self.fft_size, self.win_length, self.hop)
    }

    pub fn linear_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Triangular HTK-mel filterbank, `n_mels x bins`, each filter scaled by
/// `2 / (upper_hz - lower_hz)` so its area is one.
#[derive(Debug, Clone)]
pub struct MelFilterbank<T> {
    pub weights: Vec<T>,
    pub n_mels: usize,
    pub bins: usize,
}

impl<T: Scalar> MelFilterbank<T> {
    pub fn new(sample_rate: u32, fft_size: usize, n_mels: usize) -> Result<Self> {
        if n_mels == 0 {
            return Err(Error::config("mel filterbank needs at least one band"));
        }
        let bins = fft_size / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
        let bin_hz = |k: usize| k as f64 * sample_rate as f64 / fft_size as f64;
        let mut weights = vec![T::zero(); n_mels * bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            let mut support = 0;
            for k in 0..bins {
                let f = bin_hz(k);
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    support += 1;
                    weights[m * bins + k] = T::of(w * norm);
                }
            }
            if support == 0 {
                return Err(Error::config(format!(
                    "mel band {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; use fewer bands or a larger FFT"
                )));
            }
        }
        Ok(Self { weights, n_mels, bins })
    }

    /// Projects `frames x bins` magnitudes to `frames x n_mels`.
    pub fn apply(&self, mags: &[T], frames: usize) -> Vec<T> {
        let mut out = vec![T::zero(); frames * self.n_mels];
        for f in 0..frames {
            let row = &mags[f * self.bins..(f + 1) * self.bins];
            for m in 0..self.n_mels {
                let w = &self.weights[m * self.bins..(m + 1) * self.bins];
                out[f * self.n_mels + m] = w.iter().zip(row).fold(T::zero(), |a, (&p, &q)| a + p * q);
            }
        }
        out
    }
}

fn check_rate<T: Scalar>(audio: &AudioClip<T>, cfg: &SpectrogramConfig) -> Result<()> {
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::Ingest(format!(
            "audio is {} Hz but features are configured for {} Hz",
            audio.sample_rate, cfg.sample_rate
        )));
    }
    Ok(())
}

fn log_floor<T: Scalar>(v: &mut [T], floor: f64) {
    let floor = T::of(floor);
    v.iter_mut().for_each(|x| *x = x.max(floor).ln());
}

pub fn linear_spectrogram<T: Scalar>(audio: &AudioClip<T>, cfg: &SpectrogramConfig) -> Result<Spectrogram<T>> {
    check_rate(audio, cfg)?;
    let stft = Stft::new(cfg.geometry()?);
    let (mut mags, frames) = stft.magnitude(&audio.samples)?;
    log_floor(&mut mags, cfg.floor);
    Spectrogram::new(mags, frames, cfg.linear_bins(), SpecKind::Linear, cfg)
}

pub fn mel_spectrogram<T: Scalar>(audio: &AudioClip<T>, cfg: &SpectrogramConfig) -> Result<Spectrogram<T>> {
    check_rate(audio, cfg)?;
    let fb = MelFilterbank::<T>::new(cfg.sample_rate, cfg.fft_size, cfg.n_mels)?;
    let stft = Stft::new(cfg.geometry()?);
    let (mags, frames) = stft.magnitude(&audio.samples)?;
    let mut mel = fb.apply(&mags, frames);
    log_floor(&mut mel, cfg.floor);
    Spectrogram::new(mel, frames, cfg.n_mels, SpecKind::Mel, cfg)
}

/// Both feature kinds from one STFT pass.
pub fn features<T: Scalar>(audio: &AudioClip<T>, cfg: &SpectrogramConfig) -> Result<(Spectrogram<T>, Spectrogram<T>)> {
    check_rate(audio, cfg)?;
    let fb = MelFilterbank::<T>::new(cfg.sample_rate, cfg.fft_size, cfg.n_mels)?;
    let stft = Stft::new(cfg.geometry()?);
    let (mut mags, frames) = stft.magnitude(&audio.samples)?;
    let mut mel = fb.apply(&mags, frames);
    log_floor(&mut mel, cfg.floor);
    log_floor(&mut mags, cfg.floor);
    Ok((
        Spectrogram::new(mel, frames, cfg.n_mels, SpecKind::Mel, cfg)?,
        Spectrogram::new(mags, frames, cfg.linear_bins(), SpecKind::Linear, cfg)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 440.0, 1000.0, 12_000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn filterbank_structure() {
        let fb = MelFilterbank::<f64>::new(24_000, 2048, 80).unwrap();
        for k in 0..fb.bins {
            let n = (0..fb.n_mels).filter(|&m| fb.weights[m * fb.bins + k] > 0.0).count();
            assert!(n <= 2, "bin {k} feeds {n} filters");
        }
        assert!(fb.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn degenerate_filterbank_is_rejected() {
        assert!(MelFilterbank::<f64>::new(1000, 16, 40).is_err());
    }
}
