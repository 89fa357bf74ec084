//! Corpus ingestion and the feature cache that training reads.

use std::path::{Path, PathBuf};

use paranet_core::dsp::{features, read_wav, SpecKind, Spectrogram, SpectrogramConfig};
use paranet_core::seq2seq::{Example, SpecNorm, SPEC_FLOOR};
use paranet_core::text::{Utterance, Vocabulary};
use paranet_core::wavevae::VaeExample;
use paranet_core::AudioClip;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const METADATA_FILE: &str = "metadata.csv";
pub const CACHE_KIND: &str = "dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedEntry {
    pub file: String,
    pub text: String,
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub ingested: usize,
    pub errors: Vec<LineError>,
    /// Spectrogram frames per text token over the whole corpus.
    pub frames_per_token: f64,
    /// Reduced decoder steps per text token.
    pub steps_per_token: f64,
}

/// Featurized utterances plus what produced them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<CachedEntry>,
    pub utterances: Vec<Utterance<f64>>,
    pub spec: SpectrogramConfig,
    pub frames_per_token: f64,
    pub steps_per_token: f64,
}

fn parse_line(line: &str) -> Result<(String, String), String> {
    let fields: Vec<&str> = line.split('|').collect();
    if fields.len() < 2 {
        return Err("expected \"filename|transcript\"".into());
    }
    let file = fields[0].trim();
    // LJSpeech-style rows carry a normalized transcript last
    let text = fields[fields.len() - 1].trim();
    if file.is_empty() {
        return Err("empty file name".into());
    }
    if text.is_empty() {
        return Err("empty transcript".into());
    }
    let file = if Path::new(file).extension().is_some() { file.to_string() } else { format!("{file}.wav") };
    Ok((file, text.to_string()))
}

fn ingest_one(dir: &Path, file: &str, text: &str, vocab: &Vocabulary, spec: &SpectrogramConfig) -> Result<Utterance<f64>, String> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(format!("missing audio file {}", path.display()));
    }
    let audio: AudioClip = read_wav(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if audio.sample_rate != spec.sample_rate {
        return Err(format!("{file} is {} Hz, config expects {} Hz", audio.sample_rate, spec.sample_rate));
    }
    let mut utt = Utterance::from_text(text, vocab).map_err(|e| e.to_string())?;
    let (mel, linear) = features(&audio, spec).map_err(|e| format!("{file}: {e}"))?;
    utt.audio = Some(audio);
    utt.mel = Some(mel);
    utt.linear = Some(linear);
    Ok(utt)
}

fn ratios(utts: &[Utterance<f64>], r: usize) -> (f64, f64) {
    let tokens: usize = utts.iter().map(|u| u.tokens.len()).sum();
    let frames: usize = utts.iter().map(|u| u.mel.as_ref().map_or(0, |m| m.frames)).sum();
    let steps: usize = utts.iter().map(|u| u.mel.as_ref().map_or(0, |m| m.frames.div_ceil(r))).sum();
    (frames as f64 / tokens as f64, steps as f64 / tokens as f64)
}

/// Reads `<dir>/metadata.csv` and featurizes every line it can. Bad lines
/// are reported and skipped; a corpus with no usable line is an error.
pub fn ingest(dir: &Path, cfg: &RunConfig) -> CliResult<(Dataset, IngestReport)> {
    let meta_path = dir.join(METADATA_FILE);
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", meta_path.display())))?;
    let vocab = cfg.vocabulary()?;
    let spec = cfg.spectrogram();
    let mut errors = Vec::new();
    let mut entries = Vec::new();
    let mut utterances = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let res = parse_line(line).and_then(|(file, text)| {
            ingest_one(dir, &file, &text, &vocab, &spec).map(|u| (file, text, u))
        });
        match res {
            Ok((file, text, utt)) => {
                entries.push(CachedEntry { file, text, ids: utt.ids() });
                utterances.push(utt);
            }
            Err(msg) => {
                log::warn!("{}:{}: {msg}", meta_path.display(), n + 1);
                errors.push(LineError { line: n + 1, msg });
            }
        }
    }
    if utterances.is_empty() {
        return Err(CliError::data(format!("no usable utterances in {} ({} bad lines)", meta_path.display(), errors.len())));
    }
    let (frames_per_token, steps_per_token) = ratios(&utterances, cfg.reduction_factor);
    let report = IngestReport { ingested: utterances.len(), errors, frames_per_token, steps_per_token };
    Ok((Dataset { entries, utterances, spec, frames_per_token, steps_per_token }, report))
}

#[derive(Serialize, Deserialize)]
struct SpecMeta {
    sample_rate: u32,
    fft_size: usize,
    win_length: usize,
    hop: usize,
    n_mels: usize,
}

impl Dataset {
    /// Builds a dataset from already featurized utterances.
    pub fn from_utterances(utterances: Vec<Utterance<f64>>, spec: SpectrogramConfig, r: usize) -> CliResult<Self> {
        if utterances.is_empty() {
            return Err(CliError::data("dataset has no utterances"));
        }
        let entries = utterances
            .iter()
            .enumerate()
            .map(|(i, u)| CachedEntry { file: format!("utt{i:05}.wav"), text: u.raw_text.clone(), ids: u.ids() })
            .collect();
        let (frames_per_token, steps_per_token) = ratios(&utterances, r);
        Ok(Self { entries, utterances, spec, frames_per_token, steps_per_token })
    }

    pub fn save(&self, dir: &Path, cfg: &RunConfig) -> CliResult<PathBuf> {
        let mut ck = Checkpoint::new(CACHE_KIND, 0, cfg.seed, cfg.to_toml());
        for (i, u) in self.utterances.iter().enumerate() {
            let (Some(audio), Some(mel), Some(lin)) = (&u.audio, &u.mel, &u.linear) else {
                return Err(CliError::data(format!("utterance {i} is not featurized")));
            };
            ck.push(&format!("utt{i:05}/audio"), &[audio.samples.len()], &audio.samples)?;
            ck.push(&format!("utt{i:05}/mel"), &[mel.frames, mel.bins], &mel.values)?;
            ck.push(&format!("utt{i:05}/linear"), &[lin.frames, lin.bins], &lin.values)?;
        }
        ck.set_meta("utterances", &self.entries);
        let s = &self.spec;
        let spec = SpecMeta { sample_rate: s.sample_rate, fft_size: s.fft_size, win_length: s.win_length, hop: s.hop, n_mels: s.n_mels };
        ck.set_meta("spectrogram", &spec);
        ck.set_meta("frames_per_token", &self.frames_per_token);
        ck.set_meta("steps_per_token", &self.steps_per_token);
        ck.save(dir)
    }

    /// Loads `<dir>/dataset.json`. The cached token ids must match what
    /// `vocab` produces, so a changed alphabet is caught here.
    pub fn load(dir: &Path, vocab: &Vocabulary) -> CliResult<Self> {
        let path = dir.join(format!("{CACHE_KIND}.json"));
        if !path.is_file() {
            return Err(CliError::data(format!("no ingested dataset at {} (run `paranet ingest` first)", path.display())));
        }
        let ck = Checkpoint::load(&path)?;
        let entries: Vec<CachedEntry> = ck.meta("utterances")?;
        let m: SpecMeta = ck.meta("spectrogram")?;
        let spec = SpectrogramConfig {
            sample_rate: m.sample_rate,
            fft_size: m.fft_size,
            win_length: m.win_length,
            hop: m.hop,
            n_mels: m.n_mels,
            floor: SPEC_FLOOR,
        };
        let mut utterances = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let mut u = Utterance::from_text(&e.text, vocab)?;
            if u.ids() != e.ids {
                return Err(CliError::config(format!("cached ids for {:?} disagree with the current alphabet", e.file)));
            }
            let audio = ck.tensor_data(&format!("utt{i:05}/audio"))?;
            u.audio = Some(AudioClip::new(audio, spec.sample_rate)?);
            for (kind, name) in [(SpecKind::Mel, "mel"), (SpecKind::Linear, "linear")] {
                let (shape, values) = ck.tensor(&format!("utt{i:05}/{name}"))?;
                let s = Spectrogram::new(values, shape[0], shape[1], kind, &spec)?;
                match kind {
                    SpecKind::Mel => u.mel = Some(s),
                    SpecKind::Linear => u.linear = Some(s),
                }
            }
            utterances.push(u);
        }
        Ok(Self {
            entries,
            utterances,
            spec,
            frames_per_token: ck.meta("frames_per_token")?,
            steps_per_token: ck.meta("steps_per_token")?,
        })
    }

    /// Fails unless the cached features were computed with `cfg`'s settings.
    pub fn check_matches(&self, cfg: &RunConfig) -> CliResult<()> {
        let want = cfg.spectrogram();
        if self.spec != want {
            return Err(CliError::config(format!(
                "dataset features ({:?}) do not match the configured spectrogram ({want:?})",
                self.spec
            )));
        }
        Ok(())
    }

    pub fn examples(&self, r: usize) -> CliResult<Vec<Example<f64>>> {
        let norm = SpecNorm::new(SPEC_FLOOR);
        Ok(self.utterances.iter().map(|u| Example::from_utterance(u, r, &norm)).collect::<Result<_, _>>()?)
    }

    pub fn vae_examples(&self) -> CliResult<Vec<VaeExample<f64>>> {
        let norm = SpecNorm::new(SPEC_FLOOR);
        self.utterances
            .iter()
            .map(|u| {
                let audio = u.audio.as_ref().ok_or_else(|| CliError::data("utterance without audio"))?;
                Ok(VaeExample::from_clip(audio, &self.spec, &norm)?)
            })
            .collect()
    }
}
