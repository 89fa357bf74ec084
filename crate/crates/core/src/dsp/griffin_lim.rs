use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::stft::{Stft, StftGeometry};
use crate::dsp::{AudioClip, SpecKind, Spectrogram};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Windowed overlap-add inverse of a `frames x bins` complex spectrum, with
/// the analysis padding trimmed from both ends.
fn istft<T: Scalar>(spec: &[Complex<T>], frames: usize, geom: StftGeometry, window: &[T]) -> Vec<T> {
    let bins = geom.bins();
    let n = geom.fft_size;
    let inv = FftPlanner::new().plan_fft_inverse(n);
    let total = (frames - 1) * geom.hop + geom.win_length;
    let mut acc = vec![T::zero(); total];
    let mut wsum = vec![T::zero(); total];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let scale = T::one() / T::of_usize(n);
    for f in 0..frames {
        let row = &spec[f * bins..(f + 1) * bins];
        buf[..bins].copy_from_slice(row);
        for k in bins..n {
            buf[k] = row[n - k].conj();
        }
        inv.process(&mut buf);
        let start = f * geom.hop;
        for i in 0..geom.win_length {
            acc[start + i] += buf[i].re * scale * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    let tiny = T::of(1e-8);
    for (a, w) in acc.iter_mut().zip(&wsum) {
        if *w > tiny {
            *a /= *w;
        }
    }
    let pad = geom.pad();
    acc[pad..total - pad].to_vec()
}

/// Iterative phase reconstruction from a linear log-magnitude spectrogram.
///
/// The initial phase is zero, or uniform random when `seed` is given.
pub fn griffin_lim<T: Scalar>(spec: &Spectrogram<T>, iterations: usize, seed: Option<u64>) -> Result<AudioClip<T>> {
    if spec.kind != SpecKind::Linear {
        return Err(Error::Kind("phase reconstruction needs a linear spectrogram, got mel".into()));
    }
    let geom = StftGeometry::new(spec.fft_size, spec.win_length, spec.hop)?;
    if spec.bins != geom.bins() {
        return Err(Error::shape(format!("{} bins for fft size {}", spec.bins, spec.fft_size)));
    }
    let stft = Stft::new(geom);
    let mags: Vec<T> = spec.values.iter().map(|v| v.exp()).collect();
    let mut phase: Vec<Complex<T>> = match seed {
        None => vec![Complex::new(T::one(), T::zero()); mags.len()],
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..mags.len())
                .map(|_| Complex::from_polar(T::one(), T::of(rng.random_range(0.0..std::f64::consts::TAU))))
                .collect()
        }
    };
    let with_phase = |phase: &[Complex<T>]| -> Vec<Complex<T>> { mags.iter().zip(phase).map(|(&m, &p)| p * m).collect() };
    let mut audio = istft(&with_phase(&phase), spec.frames, geom, &stft.window);
    for _ in 0..iterations {
        let (rebuilt, frames) = stft.complex(&audio)?;
        debug_assert_eq!(frames, spec.frames);
        for (p, c) in phase.iter_mut().zip(&rebuilt) {
            let n = c.norm();
            *p = if n > T::zero() { c / n } else { Complex::new(T::one(), T::zero()) };
        }
        audio = istft(&with_phase(&phase), spec.frames, geom, &stft.window);
    }
    AudioClip::new(audio, spec.sample_rate)
}
