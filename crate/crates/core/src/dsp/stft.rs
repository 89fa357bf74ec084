use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::nn::{CustomOp, Tensor, Var};
use crate::scalar::Scalar;

/// Frame geometry shared by analysis and synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftGeometry {
    pub fft_size: usize,
    pub win_length: usize,
    pub hop: usize,
}

impl StftGeometry {
    pub fn new(fft_size: usize, win_length: usize, hop: usize) -> Result<Self> {
        if hop == 0 || win_length == 0 || win_length > fft_size {
            return Err(Error::config(format!(
                "invalid STFT geometry: fft {fft_size}, window {win_length}, hop {hop}"
            )));
        }
        Ok(Self { fft_size, win_length, hop })
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn pad(&self) -> usize {
        self.win_length / 2
    }

    /// Frames produced for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        if padded < self.win_length {
            0
        } else {
            (padded - self.win_length) / self.hop + 1
        }
    }

    /// Signal length produced by overlap-add synthesis of `frames` frames.
    pub fn synthesis_len(&self, frames: usize) -> usize {
        ((frames.max(1) - 1) * self.hop + self.win_length).saturating_sub(2 * self.pad())
    }
}

/// Periodic Hann window.
pub fn hann<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| T::of(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Source index in the original signal for padded position `i`, using
/// mirror reflection without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let j = i.rem_euclid(period);
    if j < len as isize {
        j as usize
    } else {
        (period - j) as usize
    }
}

pub(crate) struct Stft<T: Scalar> {
    pub geom: StftGeometry,
    pub window: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Stft<T> {
    pub fn new(geom: StftGeometry) -> Self {
        let fwd = FftPlanner::new().plan_fft_forward(geom.fft_size);
        Self { geom, window: hann(geom.win_length), fwd }
    }

    /// Complex spectra, `frames x bins`, row-major.
    pub fn complex(&self, x: &[T]) -> Result<(Vec<Complex<T>>, usize)> {
        let g = self.geom;
        if x.is_empty() {
            return Err(Error::Empty("audio has no samples".into()));
        }
        let frames = g.frames(x.len());
        if frames == 0 {
            return Err(Error::Empty(format!("{} samples is shorter than one frame", x.len())));
        }
        let bins = g.bins();
        let pad = g.pad() as isize;
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); g.fft_size];
        for f in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(T::zero(), T::zero()));
            let start = (f * g.hop) as isize - pad;
            for n in 0..g.win_length {
                let s = x[reflect_index(start + n as isize, x.len())];
                buf[n] = Complex::new(s * self.window[n], T::zero());
            }
            self.fwd.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        Ok((out, frames))
    }

    pub fn magnitude(&self, x: &[T]) -> Result<(Vec<T>, usize)> {
        let (spec, frames) = self.complex(x)?;
        Ok((spec.iter().map(|c| c.norm()).collect(), frames))
    }

    /// Vector-Jacobian product of `magnitude` at `x` for upstream `grad`.
    fn magnitude_vjp(&self, x: &[T], grad: &[T]) -> Vec<T> {
        let g = self.geom;
        let (spec, frames) = self.complex(x).expect("forward succeeded on the same input");
        let bins = g.bins();
        let pad = g.pad() as isize;
        let mut dx = vec![T::zero(); x.len()];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); g.fft_size];
        for f in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(T::zero(), T::zero()));
            for k in 0..bins {
                let xk = spec[f * bins + k];
                let mag = xk.norm();
                if mag > T::zero() {
                    buf[k] = xk.conj() * (grad[f * bins + k] / mag);
                }
            }
            // d|X_k|/dx_n = Re(conj(X_k) e^{-2πikn/N}) / |X_k|, i.e. a forward DFT of c_k.
            self.fwd.process(&mut buf);
            let start = (f * g.hop) as isize - pad;
            for n in 0..g.win_length {
                dx[reflect_index(start + n as isize, x.len())] += buf[n].re * self.window[n];
            }
        }
        dx
    }
}

/// Magnitude STFT of `audio`: `frames x (fft_size/2 + 1)`.
pub fn stft_magnitude<T: Scalar>(audio: &[T], fft_size: usize, win_length: usize, hop: usize) -> Result<Tensor<T>> {
    let stft = Stft::new(StftGeometry::new(fft_size, win_length, hop)?);
    let (mags, frames) = stft.magnitude(audio)?;
    Tensor::new(mags, &[frames, stft.geom.bins()])
}

struct MagnitudeOp<T: Scalar> {
    stft: Stft<T>,
}

impl<T: Scalar> CustomOp<T> for MagnitudeOp<T> {
    fn name(&self) -> &'static str {
        "stft_magnitude"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(self.stft.magnitude_vjp(inputs[0], grad_out))]
    }
}

/// Differentiable magnitude STFT of a signal variable (any shape, read flat).
pub fn stft_magnitude_var<'g, T: Scalar>(x: Var<'g, T>, geom: StftGeometry) -> Result<Var<'g, T>> {
    let stft = Stft::new(geom);
    let (mags, frames) = stft.magnitude(&x.data())?;
    let bins = geom.bins();
    x.graph().custom(&[x], mags, &[frames, bins], Box::new(MagnitudeOp { stft }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_mirror_padding() {
        // [a b c d] padded by 2: c b | a b c d | c b
        let idx: Vec<usize> = (-2..6).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, [2, 1, 0, 1, 2, 3, 2, 1]);
    }

    #[test]
    fn frame_count_formula() {
        let g = StftGeometry::new(2048, 1200, 300).unwrap();
        // len' = 24000 + 1200
        assert_eq!(g.frames(24000), (25200 - 1200) / 300 + 1);
        assert_eq!(g.synthesis_len(g.frames(24000)), 24000);
    }

    #[test]
    fn sine_peaks_at_its_bin() {
        let (n, k) = (64usize, 5usize);
        let x: Vec<f64> = (0..256).map(|t| (2.0 * std::f64::consts::PI * k as f64 * t as f64 / n as f64).sin()).collect();
        let m = stft_magnitude(&x, n, n, 16).unwrap();
        let bins = m.shape()[1];
        // frames that do not touch the reflected padding
        for f in 2..m.shape()[0] - 2 {
            let row = &m.data()[f * bins..(f + 1) * bins];
            let arg = (0..bins).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, k);
        }
    }
}
