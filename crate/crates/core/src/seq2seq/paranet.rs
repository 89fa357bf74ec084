use rand::Rng;

use crate::attention::{mask_matrix, positional_encoding, AlignmentMatrix, AttentionBlock, MaskConfig, PositionalEncodingConfig};
use crate::dsp::ReducedFrames;
use crate::error::{Error, Result};
use crate::impl_module;
use crate::nn::{Causality, ConvBlock, ForwardCtx, Graph, Linear, Var};
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::encoder::Encoder;
use super::{residual, synthesis_steps, Synthesis};

#[derive(Debug, Clone)]
pub struct ParaNetOutput<'g, T: Scalar> {
    /// `[r * mel_bins, N]`
    pub mel: Var<'g, T>,
    /// `[r * linear_bins, N]`
    pub linear: Var<'g, T>,
    /// One `[N, M]` alignment per attention block.
    pub alignments: Vec<Var<'g, T>>,
}

/// Non-autoregressive decoder: an attention block queried by positional
/// encodings alone, then L - 1 rounds of non-causal conv block + attention.
#[derive(Debug, Clone)]
pub struct ParaNet<T> {
    pub encoder: Encoder<T>,
    pub attention: Vec<AttentionBlock<T>>,
    pub blocks: Vec<ConvBlock<T>>,
    pub mel_head: Linear<T>,
    pub linear_head: Linear<T>,
    pub config: ModelConfig,
}

impl_module!(ParaNet { encoder, attention, blocks, mel_head, linear_head });

impl<T: Scalar> ParaNet<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let pc = &config.paranet;
        let (e, hidden) = (config.embedding_dim, pc.hidden);
        let encoder = Encoder::new(config.vocab_size, e, &pc.encoder, pc.keep, rng)?;
        let mut attention = Vec::with_capacity(pc.decoder_layers);
        for _ in 0..pc.decoder_layers {
            let mut a = AttentionBlock::new(hidden, e, e, hidden, config.attention_hidden, rng);
            a.context_scale = config.context_scale;
            if config.tie_projection_init && hidden == e {
                a.tie_query_key_init()?;
            }
            attention.push(a);
        }
        let blocks = (1..pc.decoder_layers)
            .map(|_| ConvBlock::new(hidden, pc.decoder_width, Causality::NonCausal, 1, pc.keep, rng))
            .collect::<Result<_>>()?;
        let mel_head = Linear::new(hidden, config.mel_width(), rng);
        let linear_head = Linear::new(hidden, config.linear_width(), rng);
        Ok(Self { encoder, attention, blocks, mel_head, linear_head, config: config.clone() })
    }

    pub fn layers(&self) -> usize {
        self.attention.len()
    }

    /// One feed-forward pass producing `steps` decoder steps. `key_rate` is
    /// the position rate of the key encoding; `mask` is row-major `[steps, M]`
    /// and shared by every attention block.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        ids: &[usize],
        steps: usize,
        key_rate: f64,
        mask: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> Result<ParaNetOutput<'g, T>> {
        if steps == 0 {
            return Err(Error::shape("ParaNet needs at least one decoder step"));
        }
        let (m, e, hidden) = (ids.len(), self.config.embedding_dim, self.config.paranet.hidden);
        let use_pe = self.config.paranet.use_positional_encoding;
        let enc = self.encoder.forward(g, ids, ctx)?;
        let (pe_q, pe_k) = if use_pe {
            let q = positional_encoding(steps, &PositionalEncodingConfig::new(hidden, self.config.position_weight))?;
            let k = positional_encoding(m, &PositionalEncodingConfig::new(e, key_rate))?;
            (Some(g.constant(q.into_data(), &[hidden, steps])?), Some(g.constant(k.into_data(), &[e, m])?))
        } else {
            (None, None)
        };
        let zeros = g.constant(vec![T::zero(); hidden * steps], &[hidden, steps])?;
        let mut alignments = Vec::with_capacity(self.layers());
        let mut h = zeros;
        for (k, block) in self.attention.iter().enumerate() {
            if k > 0 {
                h = self.blocks[k - 1].forward(g, h, ctx)?;
            }
            let (keys_h, values_h) = block.project_memory(g, enc.keys, enc.values, pe_k)?;
            let out = block.attend(g, h, keys_h, values_h, pe_q, mask)?;
            h = if k == 0 { out.context } else { residual(h, out.context)? };
            alignments.push(out.weights);
        }
        Ok(ParaNetOutput { mel: self.mel_head.forward(g, h)?, linear: self.linear_head.forward(g, h)?, alignments })
    }

    /// Parallel synthesis with a single decoder invocation. `omega` overrides
    /// the default rate of `frames_per_token / r` reduced steps per token; it
    /// sets both the output length and the key position rate.
    pub fn synthesize(&self, ids: &[usize], mask: Option<&MaskConfig>, omega: Option<f64>) -> Result<Synthesis<T>> {
        let rate = omega.unwrap_or_else(|| self.config.rates().key_rate());
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::config(format!("speech rate {rate} must be positive")));
        }
        let m = ids.len();
        let steps = synthesis_steps(m, rate);
        let mask = mask.map(|cfg| mask_matrix(steps, m, &MaskConfig { rate_ratio: 1.0 / rate, ..*cfg }));
        let g = Graph::new();
        let out = self.forward(&g, ids, steps, rate, mask.as_deref(), &mut ForwardCtx::inference())?;
        let (r, mel_bins, lin_bins) = (self.config.reduction, self.config.mel_bins, self.config.linear_bins);
        Ok(Synthesis {
            mel: ReducedFrames::from_channel_major(&out.mel.value(), steps, mel_bins, r, 0)?,
            linear: ReducedFrames::from_channel_major(&out.linear.value(), steps, lin_bins, r, 0)?,
            alignments: out
                .alignments
                .iter()
                .enumerate()
                .map(|(k, w)| AlignmentMatrix::from_var(*w, k))
                .collect::<Result<_>>()?,
            decoder_invocations: 1,
            truncated: false,
        })
    }
}
