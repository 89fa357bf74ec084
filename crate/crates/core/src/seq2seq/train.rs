use crate::attention::{distillation_loss_var, position_rate, PositionRole};
use crate::dsp::{ReducedFrames, SpecKind, Spectrogram, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Graph, Module, OptimizerState, Var};
use crate::scalar::Scalar;
use crate::text::{TokenClass, Utterance};

use super::paranet::ParaNet;
use super::teacher::Teacher;

/// Maps log magnitudes to roughly `[0, 1]`: the floor goes to 0 and a
/// magnitude of 1 to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecNorm {
    pub log_floor: f64,
}

impl SpecNorm {
    pub fn new(floor: f64) -> Self {
        Self { log_floor: floor.ln() }
    }

    pub fn normalize<T: Scalar>(&self, x: T) -> T {
        T::of(1.0 - x.as_f64() / self.log_floor)
    }

    pub fn denormalize<T: Scalar>(&self, y: T) -> T {
        T::of((1.0 - y.as_f64()) * self.log_floor)
    }
}

/// A training example: token ids with normalized, reduced targets.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub ids: Vec<usize>,
    /// Pause tokens, which alignment diagnostics may skip.
    pub exempt: Vec<bool>,
    pub mel: ReducedFrames<T>,
    pub linear: ReducedFrames<T>,
}

impl<T: Scalar> Example<T> {
    pub fn from_utterance(utt: &Utterance<T>, r: usize, norm: &SpecNorm) -> Result<Self> {
        let (Some(mel), Some(linear)) = (&utt.mel, &utt.linear) else {
            return Err(Error::contract(format!("utterance {:?} has no spectrogram targets", utt.raw_text)));
        };
        let prep = |s: &Spectrogram<T>| {
            let v: Vec<T> = s.values.iter().map(|&x| norm.normalize(x)).collect();
            crate::dsp::reduce_frames(&v, s.frames, s.bins, r)
        };
        let exempt = utt.tokens.iter().map(|t| t.class == TokenClass::Pause).collect();
        Ok(Self { ids: utt.ids(), exempt, mel: prep(mel)?, linear: prep(linear)? })
    }

    pub fn steps(&self) -> usize {
        self.mel.steps
    }
}

/// Back to a log-magnitude spectrogram, dropping any reduction padding.
pub fn to_spectrogram<T: Scalar>(
    frames: &ReducedFrames<T>,
    kind: SpecKind,
    cfg: &SpectrogramConfig,
    norm: &SpecNorm,
) -> Result<Spectrogram<T>> {
    let (values, n) = crate::dsp::expand_frames(frames, false);
    let values = values.into_iter().map(|y| norm.denormalize(y)).collect();
    Spectrogram::new(values, n, frames.bins, kind, cfg)
}

/// Mean absolute error over entries where `mask` is 1.
pub fn masked_l1<'g, T: Scalar>(pred: Var<'g, T>, target: &[T], mask: &[T]) -> Result<Var<'g, T>> {
    let g = pred.graph();
    let shape = pred.shape();
    if target.len() != pred.numel() || mask.len() != pred.numel() {
        return Err(Error::shape(format!("l1 over {shape:?} with {} targets, {} mask", target.len(), mask.len())));
    }
    let count = mask.iter().fold(T::zero(), |a, &b| a + b);
    if count <= T::zero() {
        return Err(Error::Empty("l1 mask selects nothing".into()));
    }
    let t = g.constant(target.to_vec(), &shape)?;
    let m = g.constant(mask.to_vec(), &shape)?;
    Ok(pred.sub(t)?.abs().mul(m)?.sum().scale(T::one() / count))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherLosses {
    pub mel_l1: f64,
    pub linear_l1: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParaNetLosses {
    pub mel_l1: f64,
    pub linear_l1: f64,
    pub l_atten: f64,
    pub total: f64,
}

fn check_finite<M: Module<T>, T: Scalar>(what: &str, total: f64, parts: &[(&str, f64)], model: &M) -> Result<()> {
    if total.is_finite() {
        return Ok(());
    }
    let mut bad = Vec::new();
    model.visit("", &mut |name, t| {
        if !t.is_finite() {
            bad.push(name.to_string());
        }
    });
    let parts: Vec<String> = parts.iter().map(|(n, v)| format!("{n}={v}")).collect();
    log::error!("{what} loss is {total} ({}); non-finite parameters: {bad:?}", parts.join(", "));
    Err(Error::NonFinite(format!("{what} loss {total} ({})", parts.join(", "))))
}

/// Teacher-forced ℓ1 losses for one example, as graph variables.
pub fn teacher_loss<'g, T: Scalar>(
    g: &'g Graph<T>,
    model: &Teacher<T>,
    ex: &Example<T>,
    ctx: &mut ForwardCtx,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let out = model.forward(g, &ex.ids, &ex.mel.channel_major(), ex.steps(), None, ctx)?;
    let mel = masked_l1(out.mel, &ex.mel.channel_major(), &ex.mel.valid_mask())?;
    let linear = masked_l1(out.linear, &ex.linear.channel_major(), &ex.linear.valid_mask())?;
    Ok((mel, linear))
}

/// One Adam step on mean mel ℓ1 + mean linear ℓ1, averaged over the batch.
pub fn teacher_train_step<T: Scalar>(
    model: &mut Teacher<T>,
    batch: &[Example<T>],
    opt: &mut OptimizerState<T>,
    ctx: &mut ForwardCtx,
) -> Result<TeacherLosses> {
    if batch.is_empty() {
        return Err(Error::Empty("empty training batch".into()));
    }
    let g = Graph::new();
    let scale = T::of(1.0 / batch.len() as f64);
    let (mut mel_sum, mut lin_sum) = (0.0, 0.0);
    let mut total: Option<Var<'_, T>> = None;
    for ex in batch {
        let (mel, lin) = teacher_loss(&g, model, ex, ctx)?;
        mel_sum += mel.item().as_f64();
        lin_sum += lin.item().as_f64();
        let t = mel.add(lin)?.scale(scale);
        total = Some(match total {
            Some(acc) => acc.add(t)?,
            None => t,
        });
    }
    let total = total.expect("non-empty batch");
    let n = batch.len() as f64;
    let losses = TeacherLosses { mel_l1: mel_sum / n, linear_l1: lin_sum / n, total: total.item().as_f64() };
    check_finite("teacher", losses.total, &[("mel_l1", losses.mel_l1), ("linear_l1", losses.linear_l1)], model)?;
    let grads = g.backward(total)?;
    model.accumulate_grads(&grads)?;
    opt.adam_step(model)?;
    Ok(losses)
}

/// ParaNet losses for one example given the teacher's alignment `teacher_w`
/// (`[steps, M]`, row-major).
pub fn paranet_loss<'g, T: Scalar>(
    g: &'g Graph<T>,
    model: &ParaNet<T>,
    ex: &Example<T>,
    teacher_w: &[T],
    ctx: &mut ForwardCtx,
) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
    let steps = ex.steps();
    let rate = position_rate(PositionRole::ParanetKeyTrain, steps, ex.ids.len(), &model.config.rates())?;
    let out = model.forward(g, &ex.ids, steps, rate, None, ctx)?;
    let mel = masked_l1(out.mel, &ex.mel.channel_major(), &ex.mel.valid_mask())?;
    let linear = masked_l1(out.linear, &ex.linear.channel_major(), &ex.linear.valid_mask())?;
    let atten = distillation_loss_var(&out.alignments, teacher_w)?;
    Ok((mel, linear, atten))
}

/// The frozen teacher's unmasked teacher-forced alignment for `ex`.
pub fn teacher_alignment<T: Scalar>(teacher: &Teacher<T>, ex: &Example<T>) -> Result<Vec<T>> {
    let g = Graph::new();
    let out = teacher.forward(&g, &ex.ids, &ex.mel.channel_major(), ex.steps(), None, &mut ForwardCtx::inference())?;
    Ok(out.weights.value())
}

/// One Adam step on `mel_l1 + linear_l1 + distill_weight * l_atten`. The
/// teacher runs on its own graph, so no gradient can reach it.
pub fn paranet_train_step<T: Scalar>(
    model: &mut ParaNet<T>,
    teacher: &Teacher<T>,
    batch: &[Example<T>],
    opt: &mut OptimizerState<T>,
    ctx: &mut ForwardCtx,
) -> Result<ParaNetLosses> {
    let targets = batch.iter().map(|ex| teacher_alignment(teacher, ex)).collect::<Result<Vec<_>>>()?;
    paranet_train_step_with(model, batch, &targets, opt, ctx)
}

/// [`paranet_train_step`] with precomputed teacher alignments.
pub fn paranet_train_step_with<T: Scalar>(
    model: &mut ParaNet<T>,
    batch: &[Example<T>],
    teacher_alignments: &[Vec<T>],
    opt: &mut OptimizerState<T>,
    ctx: &mut ForwardCtx,
) -> Result<ParaNetLosses> {
    if batch.is_empty() {
        return Err(Error::Empty("empty training batch".into()));
    }
    if teacher_alignments.len() != batch.len() {
        return Err(Error::shape("one teacher alignment per example required"));
    }
    let weight = model.config.paranet.distill_weight;
    let g = Graph::new();
    let scale = T::of(1.0 / batch.len() as f64);
    let (mut mel_sum, mut lin_sum, mut att_sum) = (0.0, 0.0, 0.0);
    let mut total: Option<Var<'_, T>> = None;
    for (ex, tw) in batch.iter().zip(teacher_alignments) {
        let (mel, lin, att) = paranet_loss(&g, model, ex, tw, ctx)?;
        mel_sum += mel.item().as_f64();
        lin_sum += lin.item().as_f64();
        att_sum += att.item().as_f64();
        let mut t = mel.add(lin)?;
        if weight != 0.0 {
            t = t.add(att.scale(T::of(weight)))?;
        }
        let t = t.scale(scale);
        total = Some(match total {
            Some(acc) => acc.add(t)?,
            None => t,
        });
    }
    let total = total.expect("non-empty batch");
    let n = batch.len() as f64;
    let losses = ParaNetLosses {
        mel_l1: mel_sum / n,
        linear_l1: lin_sum / n,
        l_atten: att_sum / n,
        total: total.item().as_f64(),
    };
    check_finite(
        "paranet",
        losses.total,
        &[("mel_l1", losses.mel_l1), ("linear_l1", losses.linear_l1), ("l_atten", losses.l_atten)],
        model,
    )?;
    let grads = g.backward(total)?;
    model.accumulate_grads(&grads)?;
    opt.adam_step(model)?;
    Ok(losses)
}
