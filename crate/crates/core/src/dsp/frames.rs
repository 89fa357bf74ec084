use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Groups of `r` consecutive frames packed side by side into one decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedFrames<T> {
    /// `steps x (r * bins)`, row-major.
    pub values: Vec<T>,
    pub steps: usize,
    pub bins: usize,
    pub r: usize,
    pub pad_frames: usize,
}

impl<T: Scalar> ReducedFrames<T> {
    pub fn width(&self) -> usize {
        self.r * self.bins
    }

    /// Original (unpadded) frame count.
    pub fn frames(&self) -> usize {
        self.steps * self.r - self.pad_frames
    }

    /// Channel-major copy `[r * bins, steps]` as consumed by the decoders.
    pub fn channel_major(&self) -> Vec<T> {
        let w = self.width();
        let mut out = vec![T::zero(); w * self.steps];
        for s in 0..self.steps {
            for c in 0..w {
                out[c * self.steps + s] = self.values[s * w + c];
            }
        }
        out
    }

    /// Channel-major `[r * bins, steps]` weights: 1 for real frames, 0 for tail padding.
    pub fn valid_mask(&self) -> Vec<T> {
        let real = self.frames();
        let mut out = vec![T::zero(); self.width() * self.steps];
        for c in 0..self.width() {
            for s in 0..self.steps {
                if s * self.r + c / self.bins < real {
                    out[c * self.steps + s] = T::one();
                }
            }
        }
        out
    }

    /// Inverse of [`channel_major`](Self::channel_major).
    pub fn from_channel_major(data: &[T], steps: usize, bins: usize, r: usize, pad_frames: usize) -> Result<Self> {
        let w = r * bins;
        if data.len() != w * steps {
            return Err(Error::shape(format!("{} values for {steps} steps of width {w}", data.len())));
        }
        let mut values = vec![T::zero(); w * steps];
        for s in 0..steps {
            for c in 0..w {
                values[s * w + c] = data[c * steps + s];
            }
        }
        Ok(Self { values, steps, bins, r, pad_frames })
    }
}

/// Packs `frames x bins` values into `ceil(frames / r)` steps, zero-padding the tail.
pub fn reduce_frames<T: Scalar>(values: &[T], frames: usize, bins: usize, r: usize) -> Result<ReducedFrames<T>> {
    if r == 0 {
        return Err(Error::config("reduction factor must be at least 1"));
    }
    if values.len() != frames * bins {
        return Err(Error::shape(format!("{} values for {frames} frames of {bins} bins", values.len())));
    }
    let steps = frames.div_ceil(r);
    let pad_frames = steps * r - frames;
    let mut out = values.to_vec();
    out.resize(steps * r * bins, T::zero());
    Ok(ReducedFrames { values: out, steps, bins, r, pad_frames })
}

/// Unpacks reduced steps back to frames. Padding frames are kept when
/// `keep_padding` is set, otherwise dropped.
pub fn expand_frames<T: Scalar>(reduced: &ReducedFrames<T>, keep_padding: bool) -> (Vec<T>, usize) {
    // Row-major steps x (r*bins) is already frame-ordered.
    let frames = if keep_padding { reduced.steps * reduced.r } else { reduced.frames() };
    (reduced.values[..frames * reduced.bins].to_vec(), frames)
}
