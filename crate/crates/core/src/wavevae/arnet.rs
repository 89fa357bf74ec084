use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::nn::{Causality, Conv1d, Graph, Tensor, Var};
use crate::scalar::Scalar;

pub const LOG_SIGMA_BOUND: f64 = 7.0;

/// Per-step Gaussian parameters, each `[1, T]`.
#[derive(Debug, Clone, Copy)]
pub struct ArStats<'g, T: Scalar> {
    pub mu: Var<'g, T>,
    /// Clamped to `±LOG_SIGMA_BOUND`.
    pub log_sigma: Var<'g, T>,
    pub sigma: Var<'g, T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArNetConfig {
    pub layers: usize,
    pub channels: usize,
    pub filter: usize,
    /// Dilations double per layer and reset to 1 every `cycle` layers.
    pub cycle: usize,
    pub cond_channels: usize,
}

impl ArNetConfig {
    pub fn dilation(&self, layer: usize) -> usize {
        1 << (layer % self.cycle.max(1))
    }
}

/// Gated residual layer: dilated causal conv plus conditioning, tanh/sigmoid
/// gate, then 1x1 residual and skip projections.
#[derive(Debug, Clone)]
pub struct ResidualLayer<T> {
    pub dilated: Conv1d<T>,
    pub cond: Conv1d<T>,
    pub residual: Conv1d<T>,
    pub skip: Conv1d<T>,
}

impl_module!(ResidualLayer { dilated, cond, residual, skip });

/// WaveNet-style network predicting `(mu_t, sigma_t)` from `x_<t`.
#[derive(Debug, Clone)]
pub struct GaussianArNet<T> {
    pub input: Conv1d<T>,
    pub layers: Vec<ResidualLayer<T>>,
    pub post: Conv1d<T>,
    /// Rows are `mu` and `log sigma`; starts at zero so the net begins as
    /// `mu = 0, sigma = 1`.
    pub out: Conv1d<T>,
}

impl_module!(GaussianArNet { input, layers, post, out });

impl<T: Scalar> GaussianArNet<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ArNetConfig, rng: &mut R) -> Result<Self> {
        if cfg.layers == 0 || cfg.channels == 0 || cfg.filter == 0 || cfg.cond_channels == 0 {
            return Err(Error::config("Gaussian AR net needs positive layers, channels, filter and conditioning"));
        }
        let c = cfg.channels;
        let conv = |i, o, w, d, rng: &mut R| Conv1d::new(i, o, w, Causality::Causal, d, rng);
        let input = conv(1, c, 1, 1, rng)?;
        let layers = (0..cfg.layers)
            .map(|k| {
                Ok(ResidualLayer {
                    dilated: conv(c, 2 * c, cfg.filter, cfg.dilation(k), rng)?,
                    cond: conv(cfg.cond_channels, 2 * c, 1, 1, rng)?,
                    residual: conv(c, c, 1, 1, rng)?,
                    skip: conv(c, c, 1, 1, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let post = conv(c, c, 1, 1, rng)?;
        let out = Conv1d::from_parts(
            Tensor::param(vec![T::zero(); 2 * c], &[2, c, 1])?,
            Tensor::param(vec![T::zero(); 2], &[2])?,
            Causality::Causal,
            1,
        )?;
        Ok(Self { input, layers, post, out })
    }

    /// Past samples (excluding the current one) that reach an output.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|l| l.dilated.receptive_field() - 1).sum::<usize>()
    }

    /// Teacher-forced pass. `x`: `[1, T]`; `cond`: `[cond_channels, T]`.
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, cond: Var<'g, T>) -> Result<ArStats<'g, T>> {
        let (xs, cs) = (x.shape(), cond.shape());
        if xs.len() != 2 || xs[0] != 1 || cs.len() != 2 || cs[1] != xs[1] {
            return Err(Error::shape(format!("AR net input {xs:?} with conditioning {cs:?}")));
        }
        let c = self.input.out_channels();
        let half = T::of(0.5f64.sqrt());
        let mut h = self.input.forward(g, x.shift_cols(1)?)?;
        let mut skip: Option<Var<'g, T>> = None;
        for layer in &self.layers {
            let a = layer.dilated.forward(g, h)?.add(layer.cond.forward(g, cond)?)?;
            let gated = a.slice_rows(0, c)?.tanh().mul(a.slice_rows(c, c)?.sigmoid())?;
            h = h.add(layer.residual.forward(g, gated)?)?.scale(half);
            let s = layer.skip.forward(g, gated)?;
            skip = Some(match skip {
                Some(acc) => acc.add(s)?,
                None => s,
            });
        }
        let s = self.post.forward(g, skip.expect("at least one layer").relu())?.relu();
        let out = self.out.forward(g, s)?;
        let mu = out.slice_rows(0, 1)?;
        let log_sigma = out.slice_rows(1, 1)?.clamp(T::of(-LOG_SIGMA_BOUND), T::of(LOG_SIGMA_BOUND));
        Ok(ArStats { mu, log_sigma, sigma: log_sigma.exp() })
    }
}
