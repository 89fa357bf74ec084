use std::path::Path;

use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reads a mono 16-bit PCM WAV file, scaling samples by 1/32768.
pub fn read_wav<T: Scalar>(path: &Path) -> Result<AudioClip<T>> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Ingest(format!(
            "{}: expected mono 16-bit PCM, found {} channel(s), {} bits, {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| T::of(v as f64 / 32768.0)))
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    AudioClip::new(samples, spec.sample_rate).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))
}

/// Writes mono 16-bit PCM, clipping to [-1, 1].
pub fn write_wav<T: Scalar>(path: &Path, clip: &AudioClip<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| match e {
        hound::Error::IoError(e) => Error::Io(e),
        other => Error::Input(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in &clip.samples {
        let v = (s.as_f64().clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(io)?;
    }
    w.finalize().map_err(io)
}
