//! Synthetic corpora for desk-scale training: tone-rendered utterances whose
//! spectrograms carry a per-token signature, and plain sine clips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{features, AudioClip, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::text::{TokenClass, Utterance, Vocabulary};

/// Short sentences used by the overfit corpus.
pub const TOY_SENTENCES: [&str; 4] = [
    "ANT LIVES NEXT TO GRASSHOPPER%.",
    "I LIKE TO WORK EVERY DAY%.",
    "SLEEP STILL FOGGED MY MIND.",
    "THE VAULT WAS EMPTIED%.",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyVoice {
    pub sample_rate: u32,
    pub hop: usize,
    /// Mean spectrogram frames per token.
    pub frames_per_token: f64,
    /// Token durations are scaled by a factor drawn from `1 ± jitter`.
    pub jitter: f64,
    pub amplitude: f64,
}

impl ToyVoice {
    /// Matches [`SpectrogramConfig::mini`].
    pub fn mini() -> Self {
        Self { sample_rate: 1000, hop: 10, frames_per_token: 6.3, jitter: 0.2, amplitude: 0.5 }
    }

    /// Two partials for a character token, none for silence-like tokens.
    fn partials(&self, class: TokenClass, id: usize) -> Option<(f64, f64)> {
        if class != TokenClass::Character {
            return None;
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        // a 9 x 3 grid keeps neighbouring ids several mel bands apart
        let f1 = nyquist * (0.1 + 0.1 * (id % 9) as f64);
        let f2 = nyquist * (0.15 + 0.3 * ((id / 9) % 3) as f64);
        Some((f1, f2))
    }

    pub fn render<T: Scalar>(&self, utt: &Utterance<T>, rng: &mut impl Rng) -> Result<AudioClip<T>> {
        if !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return Err(Error::config(format!("duration jitter {} outside [0, 1)", self.jitter)));
        }
        let per_token = self.frames_per_token * self.hop as f64;
        let sr = self.sample_rate as f64;
        let mut out = Vec::new();
        for tok in &utt.tokens {
            let scale = 1.0 + self.jitter * (2.0 * rng.random::<f64>() - 1.0);
            let len = (per_token * scale).round().max(1.0) as usize;
            let ramp = (len / 8).max(1);
            let partials = self.partials(tok.class, tok.id);
            let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            for n in 0..len {
                let v = match partials {
                    Some((f1, f2)) => {
                        let t = n as f64 / sr;
                        let env = (n.min(len - 1 - n) as f64 / ramp as f64).min(1.0);
                        let tau = std::f64::consts::TAU;
                        env * self.amplitude * (0.6 * (tau * f1 * t + phase).sin() + 0.4 * (tau * f2 * t).sin())
                    }
                    None => 0.0,
                };
                out.push(T::of(v));
            }
        }
        AudioClip::new(out, self.sample_rate)
    }
}

/// Tokenizes, renders and featurizes `sentences` with one seeded stream.
pub fn toy_corpus<T: Scalar>(
    sentences: &[&str],
    vocab: &Vocabulary,
    voice: &ToyVoice,
    spec: &SpectrogramConfig,
    seed: u64,
) -> Result<Vec<Utterance<T>>> {
    if voice.sample_rate != spec.sample_rate || voice.hop != spec.hop {
        return Err(Error::config("toy voice and spectrogram config disagree on rate or hop"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sentences
        .iter()
        .map(|s| {
            let mut utt = Utterance::from_text(s, vocab)?;
            let audio = voice.render(&utt, &mut rng)?;
            let (mel, linear) = features(&audio, spec)?;
            utt.audio = Some(audio);
            utt.mel = Some(mel);
            utt.linear = Some(linear);
            Ok(utt)
        })
        .collect()
}

/// `count` clips of `len` samples, each a sine with random frequency in
/// `[0.04, 0.2]` of the sample rate, amplitude in `[0.3, 0.7]` and phase.
pub fn sine_corpus<T: Scalar>(count: usize, len: usize, sample_rate: u32, seed: u64) -> Result<Vec<AudioClip<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let f = rng.random_range(0.04..0.2) * sample_rate as f64;
            let a = rng.random_range(0.3..0.7);
            let p = rng.random_range(0.0..std::f64::consts::TAU);
            let samples = (0..len)
                .map(|n| T::of(a * (std::f64::consts::TAU * f * n as f64 / sample_rate as f64 + p).sin()))
                .collect();
            AudioClip::new(samples, sample_rate)
        })
        .collect()
}
