use rand::Rng;

use crate::error::Result;
use crate::impl_module;
use crate::nn::{Causality, ConvBlock, Embedding, ForwardCtx, Graph, Linear, Var};
use crate::scalar::Scalar;

use super::config::EncoderConfig;

/// Keys and values of the encoder, both `[embedding_dim, M]`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput<'g, T: Scalar> {
    pub keys: Var<'g, T>,
    pub values: Var<'g, T>,
    pub tokens: usize,
}

/// Embedding, affine down to the conv width, non-causal conv blocks and an
/// affine back up. Values mix the keys with the raw embedding.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub embedding: Embedding<T>,
    pub pre: Linear<T>,
    pub blocks: Vec<ConvBlock<T>>,
    pub post: Linear<T>,
}

impl_module!(Encoder { embedding, pre, blocks, post });

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, cfg: &EncoderConfig, keep: f64, rng: &mut R) -> Result<Self> {
        let embedding = Embedding::new(vocab, dim, rng);
        let pre = Linear::new(dim, cfg.channels, rng);
        let blocks = (0..cfg.layers)
            .map(|_| ConvBlock::new(cfg.channels, cfg.width, Causality::NonCausal, 1, keep, rng))
            .collect::<Result<_>>()?;
        let post = Linear::new(cfg.channels, dim, rng);
        Ok(Self { embedding, pre, blocks, post })
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, ids: &[usize], ctx: &mut ForwardCtx) -> Result<EncoderOutput<'g, T>> {
        let e = self.embedding.forward(g, ids)?;
        let mut h = self.pre.forward(g, e)?;
        for b in &self.blocks {
            h = b.forward(g, h, ctx)?;
        }
        let keys = self.post.forward(g, h)?;
        let values = keys.add(e)?.scale(T::of(0.5f64.sqrt()));
        Ok(EncoderOutput { keys, values, tokens: ids.len() })
    }
}
