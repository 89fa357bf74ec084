use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{alignment_diagnostics, attention_entropy, position_rate, AlignmentDiagnostics, AlignmentMatrix, PositionRole};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Graph, OptimizerState};
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::paranet::ParaNet;
use super::teacher::Teacher;
use super::train::{paranet_train_step_with, teacher_alignment, teacher_train_step, Example};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoDistillation,
    NoPositionalEncoding,
    Layers(usize),
}

impl AblationVariant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match *self {
            Self::Full => {}
            Self::NoDistillation => cfg.paranet.distill_weight = 0.0,
            Self::NoPositionalEncoding => cfg.paranet.use_positional_encoding = false,
            Self::Layers(l) => cfg.paranet.decoder_layers = l,
        }
        cfg
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => write!(f, "full"),
            Self::NoDistillation => write!(f, "no-distillation"),
            Self::NoPositionalEncoding => write!(f, "no-pe"),
            Self::Layers(l) => write!(f, "L={l}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub variants: Vec<AblationVariant>,
    pub teacher_steps: usize,
    pub paranet_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl AblationConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            variants: vec![
                AblationVariant::Full,
                AblationVariant::NoDistillation,
                AblationVariant::NoPositionalEncoding,
                AblationVariant::Layers(6),
                AblationVariant::Layers(12),
                AblationVariant::Layers(17),
            ],
            teacher_steps: 1500,
            paranet_steps: 800,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub variant: AblationVariant,
    /// Diagnostics of the last attention block, averaged over utterances.
    pub diagnostics: AlignmentDiagnostics,
    pub entropy_first: f64,
    pub entropy_last: f64,
    pub final_loss: f64,
}

/// Averages diagnostics and first/last block entropies of a trained ParaNet
/// over `examples`, using unmasked inference-mode alignments at each
/// example's own length.
pub fn evaluate_alignment<T: Scalar>(model: &ParaNet<T>, examples: &[Example<T>]) -> Result<(AlignmentDiagnostics, f64, f64)> {
    if examples.is_empty() {
        return Err(Error::Empty("no examples to evaluate".into()));
    }
    let mut acc = AlignmentDiagnostics { skip_count: 0, repeat_count: 0, focus_rate: 0.0, diagonal_rate: 0.0 };
    let (mut first, mut last) = (0.0, 0.0);
    for ex in examples {
        let g = Graph::new();
        let rate = position_rate(PositionRole::ParanetKeyTrain, ex.steps(), ex.ids.len(), &model.config.rates())?;
        let out = model.forward(&g, &ex.ids, ex.steps(), rate, None, &mut ForwardCtx::inference())?;
        let k = out.alignments.len() - 1;
        let w0 = AlignmentMatrix::from_var(out.alignments[0], 0)?;
        let wl = AlignmentMatrix::from_var(out.alignments[k], k)?;
        let d = alignment_diagnostics(&wl, Some(&ex.exempt));
        acc.skip_count += d.skip_count;
        acc.repeat_count += d.repeat_count;
        acc.focus_rate += d.focus_rate;
        acc.diagonal_rate += d.diagonal_rate;
        first += attention_entropy(&w0);
        last += attention_entropy(&wl);
    }
    let n = examples.len() as f64;
    acc.focus_rate /= n;
    acc.diagonal_rate /= n;
    Ok((acc, first / n, last / n))
}

/// Trains `steps` full-batch ParaNet updates against fixed teacher alignments.
pub fn train_paranet<T: Scalar>(
    cfg: &ModelConfig,
    examples: &[Example<T>],
    teacher_alignments: &[Vec<T>],
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(ParaNet<T>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ParaNet::new(cfg, &mut rng)?;
    let mut opt = OptimizerState::new(learning_rate);
    let mut ctx = ForwardCtx::train(seed);
    let mut loss = f64::NAN;
    for _ in 0..steps {
        loss = paranet_train_step_with(&mut model, examples, teacher_alignments, &mut opt, &mut ctx)?.total;
    }
    Ok((model, loss))
}

/// Trains one teacher, then each ParaNet variant from the same seed, and
/// reports alignment diagnostics per variant.
pub fn ablation_suite<T: Scalar>(examples: &[Example<T>], cfg: &AblationConfig) -> Result<Vec<AblationResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut teacher = Teacher::new(&cfg.model, &mut rng)?;
    let mut opt = OptimizerState::new(cfg.learning_rate);
    let mut ctx = ForwardCtx::train(cfg.seed);
    for step in 0..cfg.teacher_steps {
        let l = teacher_train_step(&mut teacher, examples, &mut opt, &mut ctx)?;
        log::debug!("teacher step {step}: {:.4}", l.total);
    }
    let targets = examples.iter().map(|ex| teacher_alignment(&teacher, ex)).collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    for &variant in &cfg.variants {
        let model_cfg = variant.apply(&cfg.model);
        let (model, final_loss) =
            train_paranet(&model_cfg, examples, &targets, cfg.paranet_steps, cfg.learning_rate, cfg.seed + 1)?;
        let (diagnostics, entropy_first, entropy_last) = evaluate_alignment(&model, examples)?;
        log::info!("{variant}: diagonal_rate {:.3}, loss {final_loss:.4}", diagnostics.diagonal_rate);
        results.push(AblationResult { variant, diagnostics, entropy_first, entropy_last, final_loss });
    }
    Ok(results)
}
