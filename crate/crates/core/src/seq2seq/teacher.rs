use rand::Rng;

use crate::attention::{
    attention_mask, positional_encoding, positional_encoding_from, position_rate, AlignmentMatrix, AttentionBlock,
    MaskConfig, PositionRole, PositionalEncodingConfig,
};
use crate::dsp::ReducedFrames;
use crate::error::{Error, Result};
use crate::impl_module;
use crate::nn::{Causality, Conv1d, ConvBlock, ForwardCtx, Graph, Linear, Tensor, Var};
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::encoder::Encoder;
use super::{residual, synthesis_steps, Synthesis};

/// Decoder outputs for a span of steps.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput<'g, T: Scalar> {
    /// `[hidden, n]`
    pub hidden: Var<'g, T>,
    /// `[r * mel_bins, n]`
    pub mel: Var<'g, T>,
    /// `[n, M]`
    pub weights: Var<'g, T>,
}

#[derive(Debug, Clone, Copy)]
pub struct TeacherOutput<'g, T: Scalar> {
    pub mel: Var<'g, T>,
    pub linear: Var<'g, T>,
    pub weights: Var<'g, T>,
}

/// Autoregressive teacher: causal decoder with one attention block after
/// its first conv layer, plus a non-causal converter to linear spectra.
#[derive(Debug, Clone)]
pub struct Teacher<T> {
    pub encoder: Encoder<T>,
    pub input_conv: Conv1d<T>,
    pub prenet: Vec<Linear<T>>,
    pub decoder: Vec<ConvBlock<T>>,
    pub attention: AttentionBlock<T>,
    pub mel_head: Linear<T>,
    pub converter: Vec<ConvBlock<T>>,
    pub linear_head: Linear<T>,
    pub config: ModelConfig,
}

impl_module!(Teacher { encoder, input_conv, prenet, decoder, attention, mel_head, converter, linear_head });

impl<T: Scalar> Teacher<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tc = &config.teacher;
        let (e, hidden, mel_w) = (config.embedding_dim, tc.hidden(), config.mel_width());
        let encoder = Encoder::new(config.vocab_size, e, &tc.encoder, tc.keep, rng)?;
        let input_conv = Conv1d::new(mel_w, mel_w, 1, Causality::Causal, 1, rng)?;
        let mut prenet = Vec::new();
        let mut width = mel_w;
        for &size in &tc.prenet {
            prenet.push(Linear::new(width, size, rng));
            width = size;
        }
        let decoder = (0..tc.decoder_layers)
            .map(|_| ConvBlock::new(hidden, tc.decoder_width, Causality::Causal, 1, tc.keep, rng))
            .collect::<Result<_>>()?;
        let mut attention = AttentionBlock::new(hidden, e, e, hidden, config.attention_hidden, rng);
        attention.context_scale = config.context_scale;
        if config.tie_projection_init && hidden == e {
            attention.tie_query_key_init()?;
        }
        let mel_head = Linear::new(hidden, mel_w, rng);
        let converter = (0..tc.converter_layers)
            .map(|_| ConvBlock::new(hidden, tc.converter_width, Causality::NonCausal, 1, tc.keep, rng))
            .collect::<Result<_>>()?;
        let linear_head = Linear::new(hidden, config.linear_width(), rng);
        Ok(Self { encoder, input_conv, prenet, decoder, attention, mel_head, converter, linear_head, config: config.clone() })
    }

    pub fn hidden(&self) -> usize {
        self.config.teacher.hidden()
    }

    /// Steps of decoder input that influence one output step.
    pub fn receptive_field(&self) -> usize {
        1 + self.decoder.iter().map(|b| b.conv.receptive_field() - 1).sum::<usize>()
    }

    fn key_pe(&self, m: usize) -> Result<Tensor<T>> {
        let rate = position_rate(PositionRole::TeacherKey, 0, m, &self.config.rates())?;
        positional_encoding(m, &PositionalEncodingConfig::new(self.config.embedding_dim, rate))
    }

    /// Projected attention memory for token ids.
    pub fn memory<'g>(&self, g: &'g Graph<T>, ids: &[usize], ctx: &mut ForwardCtx) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let enc = self.encoder.forward(g, ids, ctx)?;
        let pe = self.key_pe(ids.len())?;
        let pe = g.constant(pe.into_data(), &[self.config.embedding_dim, ids.len()])?;
        self.attention.project_memory(g, enc.keys, enc.values, Some(pe))
    }

    /// Runs the decoder over `input` (`[r * mel_bins, n]`, already shifted so
    /// column t holds frame t - 1), whose first column is absolute step `start`.
    pub fn decode<'g>(
        &self,
        g: &'g Graph<T>,
        input: Var<'g, T>,
        memory: (Var<'g, T>, Var<'g, T>),
        start: usize,
        mask: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> Result<DecoderOutput<'g, T>> {
        let n = input.shape()[1];
        let mut h = self.input_conv.forward(g, input)?;
        for layer in &self.prenet {
            h = layer.forward(g, h)?.relu();
        }
        let mut weights = None;
        for (i, block) in self.decoder.iter().enumerate() {
            h = block.forward(g, h, ctx)?;
            if i == 0 {
                let pe = positional_encoding_from(start, n, &PositionalEncodingConfig::new(self.hidden(), self.config.position_weight))?;
                let pe = g.constant(pe.into_data(), &[self.hidden(), n])?;
                let out = self.attention.attend(g, h, memory.0, memory.1, Some(pe), mask)?;
                h = residual(h, out.context)?;
                weights = Some(out.weights);
            }
        }
        let mel = self.mel_head.forward(g, h)?;
        Ok(DecoderOutput { hidden: h, mel, weights: weights.expect("at least one decoder layer") })
    }

    pub fn convert<'g>(&self, g: &'g Graph<T>, hidden: Var<'g, T>, ctx: &mut ForwardCtx) -> Result<Var<'g, T>> {
        let mut h = hidden;
        for block in &self.converter {
            h = block.forward(g, h, ctx)?;
        }
        self.linear_head.forward(g, h)
    }

    /// Teacher-forced pass over channel-major reduced mel targets
    /// `[r * mel_bins, steps]`; step 0 sees a zero frame.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        ids: &[usize],
        target_mel: &[T],
        steps: usize,
        mask: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> Result<TeacherOutput<'g, T>> {
        let w = self.config.mel_width();
        if steps == 0 || target_mel.len() != w * steps {
            return Err(Error::contract(format!(
                "teacher forcing needs {w} x {steps} mel targets, got {} values",
                target_mel.len()
            )));
        }
        let memory = self.memory(g, ids, ctx)?;
        let input = g.constant(target_mel.to_vec(), &[w, steps])?.shift_cols(1)?;
        let dec = self.decode(g, input, memory, 0, mask, ctx)?;
        let linear = self.convert(g, dec.hidden, ctx)?;
        Ok(TeacherOutput { mel: dec.mel, linear, weights: dec.weights })
    }

    /// Autoregressive synthesis of `ceil(rate * M)` steps, one decoder
    /// invocation per step. Each invocation recomputes only the receptive
    /// field of the newest step, which reproduces a full causal pass exactly.
    pub fn synthesize(&self, ids: &[usize], max_steps: usize, mask: Option<&MaskConfig>) -> Result<Synthesis<T>> {
        let m = ids.len();
        let w = self.config.mel_width();
        let hidden = self.hidden();
        let wanted = synthesis_steps(m, self.config.rates().key_rate());
        let steps = wanted.min(max_steps);
        if steps == 0 {
            return Err(Error::config("max_steps must allow at least one step"));
        }
        let mut ctx = ForwardCtx::inference();
        let (keys_h, values_h) = {
            let g = Graph::new();
            let (k, v) = self.memory(&g, ids, &mut ctx)?;
            (k.to_tensor(), v.to_tensor())
        };
        let rf = self.receptive_field();
        // channel-major outputs, filled one column at a time
        let mut mel = vec![T::zero(); w * steps];
        let mut hid = vec![T::zero(); hidden * steps];
        let mut weights = Vec::with_capacity(steps * m);
        let mut invocations = 0;
        for j in 0..steps {
            let start = (j + 1).saturating_sub(rf);
            let len = j + 1 - start;
            let mut input = vec![T::zero(); w * len];
            for t in start.max(1)..=j {
                for c in 0..w {
                    input[c * len + (t - start)] = mel[c * steps + t - 1];
                }
            }
            let row_mask: Option<Vec<bool>> = mask.map(|cfg| {
                let mut rows = vec![false; len * m];
                for (r, i) in (start..=j).enumerate() {
                    for t in attention_mask(i, m, cfg) {
                        rows[r * m + t] = true;
                    }
                }
                rows
            });
            let g = Graph::new();
            let memory = (g.frozen(&keys_h), g.frozen(&values_h));
            let input = g.constant(input, &[w, len])?;
            let out = self.decode(&g, input, memory, start, row_mask.as_deref(), &mut ctx)?;
            invocations += 1;
            let (mv, hv, wv) = (out.mel.data(), out.hidden.data(), out.weights.data());
            for c in 0..w {
                mel[c * steps + j] = mv[c * len + len - 1];
            }
            for c in 0..hidden {
                hid[c * steps + j] = hv[c * len + len - 1];
            }
            weights.extend_from_slice(&wv[(len - 1) * m..len * m]);
        }
        let linear = {
            let g = Graph::new();
            let h = g.constant(hid, &[hidden, steps])?;
            self.convert(&g, h, &mut ctx)?.value()
        };
        Ok(Synthesis {
            mel: ReducedFrames::from_channel_major(&mel, steps, self.config.mel_bins, self.config.reduction, 0)?,
            linear: ReducedFrames::from_channel_major(&linear, steps, self.config.linear_bins, self.config.reduction, 0)?,
            alignments: vec![AlignmentMatrix::new(weights, steps, m, 0)?],
            decoder_invocations: invocations,
            truncated: steps < wanted,
        })
    }
}
