use std::path::{Path, PathBuf};

use paranet_core::dsp::{SpectrogramConfig, StftLossConfig};
use paranet_core::nn::OptimizerState;
use paranet_core::seq2seq::{EncoderConfig, ModelConfig, SPEC_FLOOR};
use paranet_core::text::Vocabulary;
use paranet_core::wavevae::{AnnealSchedule, WaveVaeConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Mini,
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::Mini => "mini",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Paranet,
    Wavevae,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Paranet => "paranet",
            ModelKind::Wavevae => "wavevae",
        })
    }
}

/// Everything a run needs. Keys mirror the hyperparameter table; where the
/// two text-to-spectrogram models differ the key carries a `teacher_` or
/// `paranet_` prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub preset: Preset,
    pub seed: u64,
    /// Dataset cache written by `ingest`.
    pub corpus: PathBuf,
    pub checkpoint_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<PathBuf>,

    pub fft_size: usize,
    pub fft_window_size: usize,
    pub fft_shift: usize,
    pub sample_rate: u32,
    pub reduction_factor: usize,
    pub mel_bands: usize,
    pub character_embedding_dim: usize,
    pub teacher_encoder_layers: usize,
    pub teacher_encoder_conv_width: usize,
    pub teacher_encoder_channels: usize,
    pub paranet_encoder_layers: usize,
    pub paranet_encoder_conv_width: usize,
    pub paranet_encoder_channels: usize,
    pub decoder_prenet_affine_size: Vec<usize>,
    pub teacher_decoder_layers: usize,
    pub teacher_decoder_conv_width: usize,
    pub paranet_decoder_layers: usize,
    pub paranet_decoder_conv_width: usize,
    pub attention_hidden_size: usize,
    pub position_weight: f64,
    pub initial_rate: f64,
    pub postnet_layers: usize,
    pub postnet_conv_width: usize,
    pub postnet_channels: usize,
    pub teacher_dropout_keep_probability: f64,
    pub paranet_dropout_keep_probability: f64,
    pub adam_learning_rate: f64,
    pub batch_size: usize,
    pub max_gradient_norm: f64,
    pub gradient_clipping_max_value: f64,

    /// Replace `initial_rate` with the ingested corpus's frames per token.
    pub rate_from_corpus: bool,
    pub distill_weight: f64,
    pub use_positional_encoding: bool,
    pub tie_projection_init: bool,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub griffin_lim_iterations: usize,

    pub wavevae_channels: usize,
    pub wavevae_encoder_layers: usize,
    pub wavevae_flow_layers: Vec<usize>,
    pub wavevae_upsample_strides: Vec<usize>,
    pub wavevae_stft_fft_size: usize,
    pub anneal_midpoint: f64,
    pub anneal_temperature: f64,

    pub ablation_teacher_steps: usize,
    pub ablation_paranet_steps: usize,
    pub ablation_layers: Vec<usize>,
}

impl RunConfig {
    pub fn full() -> Self {
        let model = ModelConfig::full(1);
        let vae = WaveVaeConfig::full();
        Self {
            model: ModelKind::Teacher,
            preset: Preset::Full,
            seed: 0,
            corpus: PathBuf::from("cache"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            teacher_checkpoint: None,
            alphabet: None,
            fft_size: 2048,
            fft_window_size: 1200,
            fft_shift: 300,
            sample_rate: 24_000,
            reduction_factor: model.reduction,
            mel_bands: model.mel_bins,
            character_embedding_dim: model.embedding_dim,
            teacher_encoder_layers: model.teacher.encoder.layers,
            teacher_encoder_conv_width: model.teacher.encoder.width,
            teacher_encoder_channels: model.teacher.encoder.channels,
            paranet_encoder_layers: model.paranet.encoder.layers,
            paranet_encoder_conv_width: model.paranet.encoder.width,
            paranet_encoder_channels: model.paranet.encoder.channels,
            decoder_prenet_affine_size: model.teacher.prenet.clone(),
            teacher_decoder_layers: model.teacher.decoder_layers,
            teacher_decoder_conv_width: model.teacher.decoder_width,
            paranet_decoder_layers: model.paranet.decoder_layers,
            paranet_decoder_conv_width: model.paranet.decoder_width,
            attention_hidden_size: model.attention_hidden,
            position_weight: model.position_weight,
            initial_rate: model.frames_per_token,
            postnet_layers: model.teacher.converter_layers,
            postnet_conv_width: model.teacher.converter_width,
            postnet_channels: model.teacher.hidden(),
            teacher_dropout_keep_probability: model.teacher.keep,
            paranet_dropout_keep_probability: model.paranet.keep,
            adam_learning_rate: 0.001,
            batch_size: 16,
            max_gradient_norm: 100.0,
            gradient_clipping_max_value: 5.0,
            rate_from_corpus: true,
            distill_weight: model.paranet.distill_weight,
            use_positional_encoding: true,
            tie_projection_init: model.tie_projection_init,
            steps: 500_000,
            checkpoint_every: 10_000,
            griffin_lim_iterations: 60,
            wavevae_channels: vae.channels,
            wavevae_encoder_layers: vae.encoder_layers,
            wavevae_flow_layers: vae.flow_layers.clone(),
            wavevae_upsample_strides: vae.upsample_strides.clone(),
            wavevae_stft_fft_size: vae.stft.fft_size,
            anneal_midpoint: vae.anneal.midpoint,
            anneal_temperature: vae.anneal.temperature,
            ablation_teacher_steps: 1500,
            ablation_paranet_steps: 800,
            ablation_layers: vec![6, 12, 17],
        }
    }

    /// Desk-scale models on 1 kHz audio.
    pub fn mini() -> Self {
        let model = ModelConfig::mini(1);
        let spec = SpectrogramConfig::mini();
        let vae = WaveVaeConfig::mini();
        Self {
            preset: Preset::Mini,
            fft_size: spec.fft_size,
            fft_window_size: spec.win_length,
            fft_shift: spec.hop,
            sample_rate: spec.sample_rate,
            mel_bands: model.mel_bins,
            character_embedding_dim: model.embedding_dim,
            teacher_encoder_layers: model.teacher.encoder.layers,
            teacher_encoder_channels: model.teacher.encoder.channels,
            paranet_encoder_layers: model.paranet.encoder.layers,
            paranet_encoder_channels: model.paranet.encoder.channels,
            decoder_prenet_affine_size: model.teacher.prenet.clone(),
            paranet_decoder_layers: model.paranet.decoder_layers,
            attention_hidden_size: model.attention_hidden,
            postnet_layers: model.teacher.converter_layers,
            postnet_channels: model.teacher.hidden(),
            batch_size: 4,
            steps: 200,
            checkpoint_every: 100,
            griffin_lim_iterations: 30,
            wavevae_channels: vae.channels,
            wavevae_encoder_layers: vae.encoder_layers,
            wavevae_flow_layers: vae.flow_layers.clone(),
            wavevae_upsample_strides: vae.upsample_strides.clone(),
            wavevae_stft_fft_size: vae.stft.fft_size,
            anneal_midpoint: vae.anneal.midpoint,
            anneal_temperature: vae.anneal.temperature,
            ablation_layers: vec![],
            ..Self::full()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::full(),
            Preset::Mini => Self::mini(),
        }
    }

    /// Preset defaults overlaid with the keys in `text`. The preset is taken
    /// from `preset` if given, else from the file, else `full`.
    pub fn from_toml(text: &str, preset: Option<Preset>) -> CliResult<Self> {
        let table: toml::Table = text.parse().map_err(|e| CliError::config(format!("config: {e}")))?;
        let from_file = match table.get("preset") {
            Some(v) => Some(
                Preset::deserialize(v.clone()).map_err(|e| CliError::config(format!("config key preset: {e}")))?,
            ),
            None => None,
        };
        let preset = preset.or(from_file).unwrap_or(Preset::Full);
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| CliError::config(e.to_string()))?;
        let mut merged = base;
        for (k, v) in table {
            merged.insert(k, v);
        }
        merged.insert("preset".into(), toml::Value::String(preset.to_string()));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, preset)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.postnet_channels != *self.decoder_prenet_affine_size.last().unwrap_or(&0) {
            return Err(CliError::config(
                "postnet_channels must equal the last decoder_prenet_affine_size (the decoder width)",
            ));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(CliError::config("batch_size and checkpoint_every must be positive"));
        }
        let spec = self.spectrogram();
        spec.geometry()?;
        if spec.n_mels != self.mel_bands {
            return Err(CliError::config("mel_bands mismatch"));
        }
        self.model_config(1)?;
        let vae = self.wavevae_config();
        vae.validate()?;
        if vae.hop() != self.fft_shift {
            return Err(CliError::config(format!(
                "wavevae_upsample_strides multiply to {}, but fft_shift is {}",
                vae.hop(),
                self.fft_shift
            )));
        }
        self.optimizer().validate()?;
        Ok(())
    }

    pub fn spectrogram(&self) -> SpectrogramConfig {
        SpectrogramConfig {
            sample_rate: self.sample_rate,
            fft_size: self.fft_size,
            win_length: self.fft_window_size,
            hop: self.fft_shift,
            n_mels: self.mel_bands,
            floor: SPEC_FLOOR,
        }
    }

    pub fn vocabulary(&self) -> CliResult<Vocabulary> {
        match &self.alphabet {
            Some(p) => Ok(Vocabulary::load(p)?),
            None => Ok(Vocabulary::default()),
        }
    }

    /// The text-to-spectrogram hyperparameters for a vocabulary of `vocab_size`.
    pub fn model_config(&self, vocab_size: usize) -> CliResult<ModelConfig> {
        let mut m = match self.preset {
            Preset::Full => ModelConfig::full(vocab_size),
            Preset::Mini => ModelConfig::mini(vocab_size),
        };
        m.embedding_dim = self.character_embedding_dim;
        m.reduction = self.reduction_factor;
        m.mel_bins = self.mel_bands;
        m.linear_bins = self.fft_size / 2 + 1;
        m.attention_hidden = self.attention_hidden_size;
        m.frames_per_token = self.initial_rate;
        m.position_weight = self.position_weight;
        m.tie_projection_init = self.tie_projection_init;
        m.teacher.encoder = EncoderConfig {
            layers: self.teacher_encoder_layers,
            width: self.teacher_encoder_conv_width,
            channels: self.teacher_encoder_channels,
        };
        m.teacher.prenet = self.decoder_prenet_affine_size.clone();
        m.teacher.decoder_layers = self.teacher_decoder_layers;
        m.teacher.decoder_width = self.teacher_decoder_conv_width;
        m.teacher.converter_layers = self.postnet_layers;
        m.teacher.converter_width = self.postnet_conv_width;
        m.teacher.keep = self.teacher_dropout_keep_probability;
        m.paranet.encoder = EncoderConfig {
            layers: self.paranet_encoder_layers,
            width: self.paranet_encoder_conv_width,
            channels: self.paranet_encoder_channels,
        };
        m.paranet.decoder_layers = self.paranet_decoder_layers;
        m.paranet.decoder_width = self.paranet_decoder_conv_width;
        m.paranet.keep = self.paranet_dropout_keep_probability;
        m.paranet.use_positional_encoding = self.use_positional_encoding;
        m.paranet.distill_weight = self.distill_weight;
        m.validate()?;
        Ok(m)
    }

    pub fn wavevae_config(&self) -> WaveVaeConfig {
        let base = match self.preset {
            Preset::Full => WaveVaeConfig::full(),
            Preset::Mini => WaveVaeConfig::mini(),
        };
        WaveVaeConfig {
            sample_rate: self.sample_rate,
            mel_bins: self.mel_bands,
            upsample_strides: self.wavevae_upsample_strides.clone(),
            channels: self.wavevae_channels,
            encoder_layers: self.wavevae_encoder_layers,
            flow_layers: self.wavevae_flow_layers.clone(),
            anneal: AnnealSchedule { midpoint: self.anneal_midpoint, temperature: self.anneal_temperature },
            stft: StftLossConfig { fft_size: self.wavevae_stft_fft_size, ..base.stft },
            ..base
        }
    }

    pub fn optimizer(&self) -> OptimizerState<f64> {
        let mut opt = OptimizerState::new(self.adam_learning_rate);
        opt.clip_norm = self.max_gradient_norm;
        opt.clip_value = self.gradient_clipping_max_value;
        opt
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::full()
    }
}
