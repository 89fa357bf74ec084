//! Building models from configs and moving them in and out of checkpoints.

use std::path::Path;

use paranet_core::nn::Module;
use paranet_core::seq2seq::{ModelConfig, ParaNet, Teacher};
use paranet_core::wavevae::WaveVae;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{ModelKind, Preset, RunConfig};
use crate::error::{CliError, CliResult};

/// A model restored from disk with the config it was trained under.
pub struct Loaded<M> {
    pub model: M,
    pub config: RunConfig,
    pub step: u64,
}

pub enum Spectrogrammer {
    Teacher(Loaded<Teacher<f64>>),
    ParaNet(Loaded<ParaNet<f64>>),
}

impl Spectrogrammer {
    pub fn config(&self) -> &RunConfig {
        match self {
            Spectrogrammer::Teacher(l) => &l.config,
            Spectrogrammer::ParaNet(l) => &l.config,
        }
    }

    pub fn model_config(&self) -> &ModelConfig {
        match self {
            Spectrogrammer::Teacher(l) => &l.model.config,
            Spectrogrammer::ParaNet(l) => &l.model.config,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Spectrogrammer::Teacher(_) => ModelKind::Teacher,
            Spectrogrammer::ParaNet(_) => ModelKind::Paranet,
        }
    }
}

/// The model config a text-to-spectrogram run uses, with the corpus rate
/// substituted when the config asks for it.
pub fn model_config_for(cfg: &RunConfig, vocab_size: usize, corpus_frames_per_token: Option<f64>) -> CliResult<ModelConfig> {
    let mut m = cfg.model_config(vocab_size)?;
    if cfg.rate_from_corpus {
        if let Some(r) = corpus_frames_per_token {
            m.frames_per_token = r;
        }
    }
    m.validate()?;
    Ok(m)
}

pub fn save_model<M: Module<f64>>(
    model: &M,
    kind: ModelKind,
    cfg: &RunConfig,
    step: u64,
    text: Option<&ModelConfig>,
    dir: &Path,
    stem: &str,
) -> CliResult<std::path::PathBuf> {
    let mut ck = Checkpoint::new(&kind.to_string(), step, cfg.seed, cfg.to_toml());
    ck.push_module(model)?;
    if let Some(m) = text {
        ck.set_meta("vocab_size", &m.vocab_size);
        ck.set_meta("frames_per_token", &m.frames_per_token);
    }
    ck.save_as(dir, stem)
}

fn open(ck: &Checkpoint, path: &Path, want: ModelKind) -> CliResult<RunConfig> {
    if ck.manifest.kind != want.to_string() {
        return Err(CliError::config(format!(
            "{} holds a {} checkpoint, expected {want}",
            path.display(),
            ck.manifest.kind
        )));
    }
    RunConfig::from_toml(&ck.manifest.config, None)
}

fn text_config(ck: &Checkpoint, cfg: &RunConfig) -> CliResult<ModelConfig> {
    let mut m = cfg.model_config(ck.meta("vocab_size")?)?;
    m.frames_per_token = ck.meta("frames_per_token")?;
    m.validate()?;
    Ok(m)
}

// Initial weights are overwritten, so the seed here does not matter.
fn init_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn teacher_from(ck: &Checkpoint, path: &Path) -> CliResult<Loaded<Teacher<f64>>> {
    let config = open(ck, path, ModelKind::Teacher)?;
    let mut model = Teacher::new(&text_config(ck, &config)?, &mut init_rng())?;
    ck.restore(&mut model)?;
    Ok(Loaded { model, config, step: ck.manifest.step })
}

fn paranet_from(ck: &Checkpoint, path: &Path) -> CliResult<Loaded<ParaNet<f64>>> {
    let config = open(ck, path, ModelKind::Paranet)?;
    let mut model = ParaNet::new(&text_config(ck, &config)?, &mut init_rng())?;
    ck.restore(&mut model)?;
    Ok(Loaded { model, config, step: ck.manifest.step })
}

pub fn load_teacher(path: &Path) -> CliResult<Loaded<Teacher<f64>>> {
    teacher_from(&Checkpoint::load(path)?, path)
}

pub fn load_paranet(path: &Path) -> CliResult<Loaded<ParaNet<f64>>> {
    paranet_from(&Checkpoint::load(path)?, path)
}

pub fn load_wavevae(path: &Path) -> CliResult<Loaded<WaveVae<f64>>> {
    let ck = Checkpoint::load(path)?;
    let config = open(&ck, path, ModelKind::Wavevae)?;
    let mut model = WaveVae::new(&config.wavevae_config(), &mut init_rng())?;
    ck.restore(&mut model)?;
    Ok(Loaded { model, config, step: ck.manifest.step })
}

/// Loads either text-to-spectrogram model, dispatching on the manifest kind.
pub fn load_spectrogrammer(path: &Path) -> CliResult<Spectrogrammer> {
    let ck = Checkpoint::load(path)?;
    match ck.manifest.kind.as_str() {
        "teacher" => Ok(Spectrogrammer::Teacher(teacher_from(&ck, path)?)),
        "paranet" => Ok(Spectrogrammer::ParaNet(paranet_from(&ck, path)?)),
        other => Err(CliError::config(format!("{} holds a {other} checkpoint, not a spectrogram model", path.display()))),
    }
}

pub fn same_preset(a: &RunConfig, b: &RunConfig) -> CliResult<Preset> {
    if a.preset != b.preset {
        return Err(CliError::config(format!("checkpoints use different presets ({} vs {})", a.preset, b.preset)));
    }
    Ok(a.preset)
}
