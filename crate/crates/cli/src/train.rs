use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use paranet_core::nn::ForwardCtx;
use paranet_core::seq2seq::{
    ablation_suite, paranet_train_step_with, teacher_alignment, teacher_train_step, AblationConfig,
    AblationResult, AblationVariant, ParaNet, Teacher,
};
use paranet_core::wavevae::{wavevae_train_step, WaveVae};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelKind, RunConfig};
use crate::dataset::Dataset;
use crate::error::{CliError, CliResult};
use crate::models::{load_teacher, model_config_for, save_model};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Overrides the configured step count.
    pub steps: Option<u64>,
    /// Overrides `teacher_checkpoint` for ParaNet training.
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub first_total: f64,
    pub last_total: f64,
}

/// Cycles through shuffled epochs of example indices.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, size: size.min(n), rng }
    }

    fn next(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    fn new(path: &Path, header: &[&str]) -> CliResult<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "step,{}", header.join(","))?;
        Ok(Self { out })
    }

    fn row(&mut self, step: u64, values: &[f64]) -> CliResult<()> {
        let cols: Vec<String> = values.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(self.out, "{step},{}", cols.join(","))?;
        Ok(())
    }

    fn flush(&mut self) -> CliResult<()> {
        Ok(self.out.flush()?)
    }
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Trains the model named by `cfg.model` on the cached dataset, writing
/// `<out>/<model>_loss.csv` and checkpoints under `<out>/<checkpoint_dir>`.
pub fn train(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> CliResult<TrainSummary> {
    let vocab = cfg.vocabulary()?;
    let data = Dataset::load(&cfg.corpus, &vocab)?;
    data.check_matches(cfg)?;
    std::fs::create_dir_all(out)?;
    let ckpt_dir = out.join(&cfg.checkpoint_dir);
    let steps = opts.steps.unwrap_or(cfg.steps);
    if steps == 0 {
        return Err(CliError::config("training needs at least one step"));
    }
    let kind = cfg.model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batcher = Batcher::new(data.utterances.len(), cfg.batch_size, cfg.seed ^ 0x5eed);
    let mut opt = cfg.optimizer();
    let log_path = out.join(format!("{kind}_loss.csv"));
    let mut totals = Vec::with_capacity(steps as usize);
    let stem = kind.to_string();

    // Saves periodic and final checkpoints for whichever model is training.
    let checkpoint = |model: &dyn Fn(&str, u64) -> CliResult<PathBuf>, step: u64| -> CliResult<Option<PathBuf>> {
        if step == steps {
            return model(&stem, step).map(Some);
        }
        if step.is_multiple_of(cfg.checkpoint_every) {
            model(&format!("{stem}-{step:07}"), step)?;
        }
        Ok(None)
    };

    let final_path = match kind {
        ModelKind::Teacher => {
            let mcfg = model_config_for(cfg, vocab.len(), Some(data.frames_per_token))?;
            let examples = data.examples(mcfg.reduction)?;
            let mut model = Teacher::new(&mcfg, &mut rng)?;
            let mut ctx = ForwardCtx::train(cfg.seed);
            let mut log = LossLog::new(&log_path, &["mel_l1", "linear_l1", "total"])?;
            let mut last = None;
            for step in 1..=steps {
                let batch = pick(&examples, &batcher.next());
                let l = teacher_train_step(&mut model, &batch, &mut opt, &mut ctx)?;
                log.row(step, &[l.mel_l1, l.linear_l1, l.total])?;
                totals.push(l.total);
                let save = |s: &str, at: u64| save_model(&model, kind, cfg, at, Some(&mcfg), &ckpt_dir, s);
                last = checkpoint(&save, step)?.or(last);
            }
            log.flush()?;
            last
        }
        ModelKind::Paranet => {
            let teacher_path = opts.teacher.clone().or_else(|| cfg.teacher_checkpoint.clone()).ok_or_else(|| {
                CliError::config("ParaNet training needs a teacher checkpoint (set teacher_checkpoint or pass --teacher)")
            })?;
            let teacher = load_teacher(&teacher_path)?;
            if teacher.config.preset != cfg.preset {
                return Err(CliError::config(format!(
                    "teacher was trained with the {} preset, this run uses {}",
                    teacher.config.preset, cfg.preset
                )));
            }
            let mut mcfg = model_config_for(cfg, vocab.len(), Some(data.frames_per_token))?;
            // distillation targets only make sense at the teacher's rate
            mcfg.frames_per_token = teacher.model.config.frames_per_token;
            let examples = data.examples(mcfg.reduction)?;
            let targets = examples
                .iter()
                .map(|ex| teacher_alignment(&teacher.model, ex))
                .collect::<Result<Vec<_>, _>>()?;
            let mut model = ParaNet::new(&mcfg, &mut rng)?;
            let mut ctx = ForwardCtx::train(cfg.seed);
            let mut log =
                LossLog::new(&log_path, &["mel_l1", "linear_l1", "l_atten", "distill_weight", "total"])?;
            let mut last = None;
            for step in 1..=steps {
                let idx = batcher.next();
                let (batch, tw) = (pick(&examples, &idx), pick(&targets, &idx));
                let l = paranet_train_step_with(&mut model, &batch, &tw, &mut opt, &mut ctx)?;
                log.row(step, &[l.mel_l1, l.linear_l1, l.l_atten, mcfg.paranet.distill_weight, l.total])?;
                totals.push(l.total);
                let save = |s: &str, at: u64| save_model(&model, kind, cfg, at, Some(&mcfg), &ckpt_dir, s);
                last = checkpoint(&save, step)?.or(last);
            }
            log.flush()?;
            last
        }
        ModelKind::Wavevae => {
            let examples = data.vae_examples()?;
            let mut model = WaveVae::new(&cfg.wavevae_config(), &mut rng)?;
            let mut log =
                LossLog::new(&log_path, &["recon", "kl_raw", "anneal", "kl", "stft_recon", "stft_prior", "total"])?;
            let mut last = None;
            for step in 1..=steps {
                let batch = pick(&examples, &batcher.next());
                let l = wavevae_train_step(&mut model, &batch, step - 1, &mut opt, &mut rng)?;
                log.row(step, &[l.recon, l.kl_raw, l.anneal, l.kl, l.stft_recon, l.stft_prior, l.total])?;
                totals.push(l.total);
                let save = |s: &str, at: u64| save_model(&model, kind, cfg, at, None, &ckpt_dir, s);
                last = checkpoint(&save, step)?.or(last);
            }
            log.flush()?;
            last
        }
    };
    let checkpoint = final_path.expect("final step always saves");
    log::info!("{kind}: {steps} steps, total loss {:.4} -> {:.4}", totals[0], totals[totals.len() - 1]);
    Ok(TrainSummary { log: log_path, checkpoint, steps, first_total: totals[0], last_total: totals[totals.len() - 1] })
}

/// The ablation variants `cfg` asks for: the three structural ones plus one
/// per entry of `ablation_layers`.
pub fn ablation_variants(cfg: &RunConfig) -> Vec<AblationVariant> {
    let mut v = vec![AblationVariant::Full, AblationVariant::NoDistillation, AblationVariant::NoPositionalEncoding];
    v.extend(cfg.ablation_layers.iter().map(|&l| AblationVariant::Layers(l)));
    v
}

/// Runs the ablation suite on the cached dataset and writes `<out>/ablation.csv`.
pub fn ablate(cfg: &RunConfig, out: &Path) -> CliResult<Vec<AblationResult>> {
    let vocab = cfg.vocabulary()?;
    let data = Dataset::load(&cfg.corpus, &vocab)?;
    data.check_matches(cfg)?;
    let mcfg = model_config_for(cfg, vocab.len(), Some(data.frames_per_token))?;
    let examples = data.examples(mcfg.reduction)?;
    let acfg = AblationConfig {
        model: mcfg,
        variants: ablation_variants(cfg),
        teacher_steps: cfg.ablation_teacher_steps,
        paranet_steps: cfg.ablation_paranet_steps,
        learning_rate: cfg.adam_learning_rate,
        seed: cfg.seed,
    };
    let results = ablation_suite(&examples, &acfg)?;
    std::fs::create_dir_all(out)?;
    let mut text = String::from("variant,skip_count,repeat_count,focus_rate,diagonal_rate,entropy_first,entropy_last,final_loss\n");
    for r in &results {
        let d = &r.diagnostics;
        writeln!(
            text,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.variant, d.skip_count, d.repeat_count, d.focus_rate, d.diagonal_rate, r.entropy_first, r.entropy_last, r.final_loss
        )
        .expect("string write");
    }
    std::fs::write(out.join("ablation.csv"), text)?;
    Ok(results)
}
