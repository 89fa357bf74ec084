//! Writes synthetic corpora in the layout `ingest` reads.

use std::fmt::Write as _;
use std::path::Path;

use paranet_core::corpus::{sine_corpus, ToyVoice, TOY_SENTENCES};
use paranet_core::dsp::write_wav;
use paranet_core::text::Utterance;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::METADATA_FILE;
use crate::error::CliResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ToyKind {
    /// Tone-rendered sentences with a per-token spectral signature.
    Speech,
    /// Plain sines for vocoder training.
    Sine,
}

/// Sine clips last half a second.
const SINE_SECONDS: f64 = 0.5;
const SINE_CLIPS: usize = 4;

/// Writes WAVs plus `metadata.csv` into `out`; returns the number of clips.
pub fn write_toy_corpus(cfg: &RunConfig, kind: ToyKind, out: &Path) -> CliResult<usize> {
    std::fs::create_dir_all(out)?;
    let mut meta = String::new();
    match kind {
        ToyKind::Speech => {
            let vocab = cfg.vocabulary()?;
            let voice = ToyVoice { sample_rate: cfg.sample_rate, hop: cfg.fft_shift, ..ToyVoice::mini() };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for (i, s) in TOY_SENTENCES.iter().enumerate() {
                let utt = Utterance::<f64>::from_text(s, &vocab)?;
                let clip = voice.render(&utt, &mut rng)?;
                let name = format!("toy{:02}", i + 1);
                write_wav(&out.join(format!("{name}.wav")), &clip)?;
                writeln!(meta, "{name}|{s}").expect("string write");
            }
        }
        ToyKind::Sine => {
            let len = (SINE_SECONDS * cfg.sample_rate as f64) as usize;
            let clips = sine_corpus::<f64>(SINE_CLIPS, len, cfg.sample_rate, cfg.seed)?;
            for (i, clip) in clips.iter().enumerate() {
                let name = format!("sine{:02}", i + 1);
                write_wav(&out.join(format!("{name}.wav")), clip)?;
                writeln!(meta, "{name}|TONE.").expect("string write");
            }
        }
    }
    std::fs::write(out.join(METADATA_FILE), &meta)?;
    Ok(meta.lines().count())
}
