//! Synthesis, latency benchmarking and attention analysis.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use paranet_core::attention::{alignment_diagnostics, AlignmentMatrix, MaskConfig};
use paranet_core::dsp::{griffin_lim, write_wav, SpecKind};
use paranet_core::export::{write_csv, write_pgm};
use paranet_core::seq2seq::{to_spectrogram, ParaNet, SpecNorm, Synthesis, Teacher, SPEC_FLOOR};
use paranet_core::text::{parse_test_set, TokenClass, Utterance, Vocabulary, TEST_SET_100, TEST_SET_15};
use paranet_core::wavevae::conditioning_mel;
use paranet_core::AudioClip;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::models::{load_paranet, load_spectrogrammer, load_teacher, load_wavevae, same_preset, Spectrogrammer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Vocoder {
    #[value(name = "griffinlim")]
    GriffinLim,
    #[value(name = "wavevae")]
    WaveVae,
}

impl std::fmt::Display for Vocoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Vocoder::GriffinLim => "griffinlim",
            Vocoder::WaveVae => "wavevae",
        })
    }
}

/// Utterances from `--text` values, or from a test set: `15`, `100` or a
/// file of numbered sentences.
pub fn load_inputs(texts: &[String], test_set: Option<&str>, vocab: &Vocabulary) -> CliResult<Vec<Utterance<f64>>> {
    let mut out: Vec<Utterance<f64>> = match test_set {
        None => Vec::new(),
        Some("15") => parse_test_set(TEST_SET_15, vocab)?,
        Some("100") => parse_test_set(TEST_SET_100, vocab)?,
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::data(format!("cannot read test set {path}: {e}")))?;
            parse_test_set(&text, vocab)?
        }
    };
    for t in texts {
        out.push(Utterance::from_text(t, vocab)?);
    }
    if out.is_empty() {
        return Err(CliError::config("nothing to synthesize: pass --text or --test-set"));
    }
    for (i, u) in out.iter().enumerate() {
        let unknown = u.tokens.iter().filter(|t| t.class == TokenClass::Unknown).count();
        if unknown > 0 {
            log::warn!("sentence {}: {unknown} unknown token(s) in {:?}", i + 1, u.raw_text);
        }
    }
    Ok(out)
}

/// The alphabet a checkpoint was trained with, read from its manifest.
pub fn checkpoint_vocabulary(ckpt: &Path) -> CliResult<Vocabulary> {
    let manifest = Checkpoint::read_manifest(ckpt)?;
    RunConfig::from_toml(&manifest.config, None)?.vocabulary()
}

/// One synthesis pass. Masking uses the model's own rate; `speed` is only
/// meaningful for ParaNet.
pub fn synthesize_one(model: &Spectrogrammer, ids: &[usize], mask: bool, speed: Option<f64>) -> CliResult<Synthesis<f64>> {
    let mcfg = model.model_config();
    let mask_cfg = MaskConfig::from_rates(&mcfg.rates());
    let mask = mask.then_some(&mask_cfg);
    match model {
        Spectrogrammer::ParaNet(p) => Ok(p.model.synthesize(ids, mask, speed)?),
        Spectrogrammer::Teacher(t) => {
            if speed.is_some() {
                return Err(CliError::config("--speed applies to ParaNet checkpoints only"));
            }
            Ok(t.model.synthesize(ids, usize::MAX, mask)?)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub mask: bool,
    pub speed: Option<f64>,
    pub vocoder: Vocoder,
    pub vocoder_checkpoint: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub index: usize,
    pub tokens: usize,
    pub unknown_tokens: usize,
    pub steps: usize,
    pub decoder_invocations: usize,
    pub blocks: usize,
    pub truncated: bool,
    pub vocoder: Vocoder,
    pub wav: PathBuf,
}

fn write_spectrogram(dir: &Path, stem: &str, values: &[f64], frames: usize, bins: usize) -> CliResult<()> {
    write_csv(&dir.join(format!("{stem}.csv")), values, frames, bins)?;
    write_pgm(&dir.join(format!("{stem}.pgm")), values, frames, bins)?;
    Ok(())
}

/// Synthesizes every input with the checkpoint at `ckpt`, writing
/// spectrograms, per-block alignments, WAVs and `synthesis.csv` into `out`.
pub fn synthesize(ckpt: &Path, inputs: &[Utterance<f64>], opts: &SynthOptions, out: &Path) -> CliResult<Vec<SynthRecord>> {
    let model = load_spectrogrammer(ckpt)?;
    let cfg = model.config().clone();
    let spec = cfg.spectrogram();
    let norm = SpecNorm::new(SPEC_FLOOR);

    let vocoder = match (opts.vocoder, &opts.vocoder_checkpoint) {
        (Vocoder::WaveVae, Some(p)) if p.is_file() => {
            let v = load_wavevae(p)?;
            same_preset(&cfg, &v.config)?;
            Some(v)
        }
        (Vocoder::WaveVae, p) => {
            let what = p.as_ref().map_or("none given".to_string(), |p| format!("{} not found", p.display()));
            eprintln!("notice: WaveVAE checkpoint missing ({what}); falling back to Griffin-Lim");
            None
        }
        (Vocoder::GriffinLim, _) => None,
    };
    std::fs::create_dir_all(out)?;
    let mut records = Vec::with_capacity(inputs.len());
    let mut summary =
        String::from("index,tokens,unknown_tokens,steps,decoder_invocations,blocks,truncated,vocoder,wav\n");
    for (i, utt) in inputs.iter().enumerate() {
        let stem = format!("utt{:03}", i + 1);
        let synth = synthesize_one(&model, &utt.ids(), opts.mask, opts.speed)?;
        let mel = to_spectrogram(&synth.mel, SpecKind::Mel, &spec, &norm)?;
        let linear = to_spectrogram(&synth.linear, SpecKind::Linear, &spec, &norm)?;
        write_spectrogram(out, &format!("{stem}_mel"), &mel.values, mel.frames, mel.bins)?;
        write_spectrogram(out, &format!("{stem}_linear"), &linear.values, linear.frames, linear.bins)?;
        for a in &synth.alignments {
            a.export(out, &format!("{stem}_align"))?;
        }
        let (audio, used): (AudioClip, Vocoder) = match &vocoder {
            Some(v) => {
                let cond = conditioning_mel(&mel, &norm);
                (v.model.synthesize_seeded(&cond, mel.frames, opts.seed)?, Vocoder::WaveVae)
            }
            None => (griffin_lim(&linear, cfg.griffin_lim_iterations, Some(opts.seed))?, Vocoder::GriffinLim),
        };
        let wav = out.join(format!("{stem}.wav"));
        write_wav(&wav, &audio)?;
        let rec = SynthRecord {
            index: i + 1,
            tokens: utt.tokens.len(),
            unknown_tokens: utt.tokens.iter().filter(|t| t.class == TokenClass::Unknown).count(),
            steps: synth.steps(),
            decoder_invocations: synth.decoder_invocations,
            blocks: synth.alignments.len(),
            truncated: synth.truncated,
            vocoder: used,
            wav,
        };
        writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{}",
            rec.index,
            rec.tokens,
            rec.unknown_tokens,
            rec.steps,
            rec.decoder_invocations,
            rec.blocks,
            rec.truncated,
            rec.vocoder,
            rec.wav.file_name().and_then(|n| n.to_str()).unwrap_or_default()
        )
        .expect("string write");
        records.push(rec);
    }
    std::fs::write(out.join("synthesis.csv"), summary)?;
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub runs: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Times `runs` calls of `f` after one untimed warm-up call.
pub fn time_runs<F: FnMut() -> CliResult<()>>(runs: usize, mut f: F) -> CliResult<Timing> {
    if runs == 0 {
        return Err(CliError::config("benchmark needs at least one run"));
    }
    f()?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / runs as f64;
    let min_ms = times.iter().copied().fold(f64::INFINITY, f64::min);
    let max_ms = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Timing { runs, mean_ms, min_ms, max_ms })
}

#[derive(Debug, Clone)]
pub struct LatencyRow {
    pub index: usize,
    pub tokens: usize,
    pub steps: usize,
    pub teacher_invocations: usize,
    pub paranet_invocations: usize,
    pub teacher: Timing,
    pub paranet: Timing,
}

#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    pub runs: usize,
    /// Summed teacher mean latency over summed ParaNet mean latency.
    pub speedup: f64,
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "sentence,tokens,steps,teacher_invocations,paranet_invocations,runs,\
             teacher_mean_ms,teacher_min_ms,teacher_max_ms,paranet_mean_ms,paranet_min_ms,paranet_max_ms,speedup\n",
        );
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.3}",
                r.index,
                r.tokens,
                r.steps,
                r.teacher_invocations,
                r.paranet_invocations,
                r.teacher.runs,
                r.teacher.mean_ms,
                r.teacher.min_ms,
                r.teacher.max_ms,
                r.paranet.mean_ms,
                r.paranet.min_ms,
                r.paranet.max_ms,
                r.teacher.mean_ms / r.paranet.mean_ms
            )
            .expect("string write");
        }
        let (t, p) = self.totals();
        writeln!(s, "all,,,,,{},{t:.4},,,{p:.4},,,{:.3}", self.runs, self.speedup).expect("string write");
        s
    }

    fn totals(&self) -> (f64, f64) {
        let t = self.rows.iter().map(|r| r.teacher.mean_ms).sum();
        let p = self.rows.iter().map(|r| r.paranet.mean_ms).sum();
        (t, p)
    }
}

/// Unmasked batch-size-one synthesis latency of both models on every input.
pub fn bench(teacher: &Teacher<f64>, paranet: &ParaNet<f64>, inputs: &[Utterance<f64>], runs: usize) -> CliResult<LatencyReport> {
    let mut rows = Vec::with_capacity(inputs.len());
    for (i, utt) in inputs.iter().enumerate() {
        let ids = utt.ids();
        let t_syn = teacher.synthesize(&ids, usize::MAX, None)?;
        let p_syn = paranet.synthesize(&ids, None, None)?;
        let teacher_t = time_runs(runs, || {
            std::hint::black_box(teacher.synthesize(&ids, usize::MAX, None)?);
            Ok(())
        })?;
        let paranet_t = time_runs(runs, || {
            std::hint::black_box(paranet.synthesize(&ids, None, None)?);
            Ok(())
        })?;
        rows.push(LatencyRow {
            index: i + 1,
            tokens: ids.len(),
            steps: p_syn.steps(),
            teacher_invocations: t_syn.decoder_invocations,
            paranet_invocations: p_syn.decoder_invocations,
            teacher: teacher_t,
            paranet: paranet_t,
        });
    }
    let mut report = LatencyReport { rows, runs, speedup: 0.0 };
    let (t, p) = report.totals();
    report.speedup = t / p;
    Ok(report)
}

/// Loads both checkpoints (outside the timed section), benchmarks them and
/// writes `<out>/bench.csv`.
pub fn bench_checkpoints(
    teacher: &Path,
    paranet: &Path,
    test_set: &str,
    runs: usize,
    out: &Path,
) -> CliResult<LatencyReport> {
    let t = load_teacher(teacher)?;
    let p = load_paranet(paranet)?;
    same_preset(&t.config, &p.config)?;
    let inputs = load_inputs(&[], Some(test_set), &t.config.vocabulary()?)?;
    let report = bench(&t.model, &p.model, &inputs, runs)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("bench.csv"), report.to_csv())?;
    Ok(report)
}

/// Decoder steps whose peak attention weight is below this count as unfocused.
pub const LOW_FOCUS_PEAK: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub index: usize,
    pub masked: bool,
    pub tokens: usize,
    pub steps: usize,
    pub skip: usize,
    pub repeat: usize,
    pub low_focus: usize,
    pub focus_rate: f64,
    pub diagonal_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionTotals {
    pub masked: bool,
    pub sentences: usize,
    pub tokens: usize,
    pub skip: usize,
    pub repeat: usize,
    pub low_focus: usize,
}

pub fn low_focus_steps(w: &AlignmentMatrix<f64>) -> usize {
    (0..w.steps).filter(|&j| w.row(j).iter().copied().fold(f64::NEG_INFINITY, f64::max) < LOW_FOCUS_PEAK).count()
}

/// Proxy error counts on the final attention block for each input, once per
/// entry of `modes` (`true` = masked).
pub fn analyze_attention(
    model: &Spectrogrammer,
    inputs: &[Utterance<f64>],
    modes: &[bool],
) -> CliResult<(Vec<AttentionRow>, Vec<AttentionTotals>)> {
    let mut rows = Vec::new();
    let mut totals = Vec::new();
    for &masked in modes {
        let mut t = AttentionTotals { masked, sentences: 0, tokens: 0, skip: 0, repeat: 0, low_focus: 0 };
        for (i, utt) in inputs.iter().enumerate() {
            let synth = synthesize_one(model, &utt.ids(), masked, None)?;
            let w = synth.alignments.last().ok_or_else(|| CliError::data("model produced no alignments"))?;
            let exempt: Vec<bool> = utt.tokens.iter().map(|t| t.class == TokenClass::Pause).collect();
            let d = alignment_diagnostics(w, Some(&exempt));
            let row = AttentionRow {
                index: i + 1,
                masked,
                tokens: w.tokens,
                steps: w.steps,
                skip: d.skip_count,
                repeat: d.repeat_count,
                low_focus: low_focus_steps(w),
                focus_rate: d.focus_rate,
                diagonal_rate: d.diagonal_rate,
            };
            t.sentences += 1;
            t.tokens += row.tokens;
            t.skip += row.skip;
            t.repeat += row.repeat;
            t.low_focus += row.low_focus;
            rows.push(row);
        }
        totals.push(t);
    }
    Ok((rows, totals))
}

pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let mut s = String::from("sentence,masked,tokens,steps,skip,repeat,low_focus,focus_rate,diagonal_rate\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{:.6},{:.6}",
            r.index, r.masked, r.tokens, r.steps, r.skip, r.repeat, r.low_focus, r.focus_rate, r.diagonal_rate
        )
        .expect("string write");
    }
    s
}

pub fn totals_csv(totals: &[AttentionTotals]) -> String {
    let mut s = String::from("masked,sentences,tokens,skip,repeat,low_focus\n");
    for t in totals {
        writeln!(s, "{},{},{},{},{},{}", t.masked, t.sentences, t.tokens, t.skip, t.repeat, t.low_focus)
            .expect("string write");
    }
    s
}

/// Runs [`analyze_attention`] from a checkpoint and writes
/// `<out>/attention.csv` and `<out>/attention_totals.csv`.
pub fn analyze_checkpoint(
    ckpt: &Path,
    test_set: &str,
    modes: &[bool],
    out: &Path,
) -> CliResult<(Vec<AttentionRow>, Vec<AttentionTotals>)> {
    let model = load_spectrogrammer(ckpt)?;
    let inputs = load_inputs(&[], Some(test_set), &model.config().vocabulary()?)?;
    let (rows, totals) = analyze_attention(&model, &inputs, modes)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("attention.csv"), attention_csv(&rows))?;
    std::fs::write(out.join("attention_totals.csv"), totals_csv(&totals))?;
    Ok((rows, totals))
}
