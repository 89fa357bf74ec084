//! Waveform VAE: a whitening autoregressive encoder, an IAF decoder whose
//! flows compose into one Gaussian per sample, and an annealed ELBO with
//! STFT losses.

mod arnet;
mod conditioner;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use arnet::{ArNetConfig, ArStats, GaussianArNet, ResidualLayer, LOG_SIGMA_BOUND};
pub use conditioner::{conv_transpose2d, Conditioner, ConvTranspose2d, CONDITIONER_SLOPE};

use crate::dsp::{stft_loss_var, AudioClip, Spectrogram, SpectrogramConfig, StftLossConfig};
use crate::seq2seq::SpecNorm;
use crate::error::{Error, Result};
use crate::impl_module;
use crate::nn::{Graph, Module, OptimizerState, Tensor, Var};
use crate::scalar::Scalar;

/// `1 / (1 + exp(-(step - midpoint) / temperature))`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub midpoint: f64,
    pub temperature: f64,
}

impl AnnealSchedule {
    pub fn full() -> Self {
        Self { midpoint: 50_000.0, temperature: 10_000.0 }
    }

    pub fn mini() -> Self {
        Self { midpoint: 200.0, temperature: 50.0 }
    }

    pub fn weight(&self, step: u64) -> f64 {
        anneal_weight(step, self)
    }
}

pub fn anneal_weight(step: u64, s: &AnnealSchedule) -> f64 {
    1.0 / (1.0 + (-(step as f64 - s.midpoint) / s.temperature).exp())
}

/// `sum_t log(1/eps) + (eps^2 - 1 + ((x_t - mu_t) / sigma_t)^2) / 2`
pub fn kl_closed_form(x: &[f64], mu: &[f64], sigma: &[f64], eps: f64) -> Result<f64> {
    if x.len() != mu.len() || x.len() != sigma.len() {
        return Err(Error::shape(format!("KL over {} / {} / {} steps", x.len(), mu.len(), sigma.len())));
    }
    if !(eps > 0.0) || sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Input("KL needs positive eps and sigma".into()));
    }
    Ok(x.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((x, m), s)| {
            let d = (x - m) / s;
            -eps.ln() + 0.5 * (eps * eps - 1.0 + d * d)
        })
        .sum())
}

/// Closed-form composition of affine flows. `stages[i] = (mu_i, sigma_i)`
/// per step, with the base distribution first. Returns `(mu_tot, sigma_tot)`
/// with `sigma_tot = prod sigma_i` and `mu_tot = sum mu_i prod_{j>i} sigma_j`.
pub fn iaf_compose(stages: &[(Vec<f64>, Vec<f64>)]) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some((first, _)) = stages.first() else {
        return Err(Error::Empty("no flow stages to compose".into()));
    };
    let n = first.len();
    if stages.iter().any(|(m, s)| m.len() != n || s.len() != n) {
        return Err(Error::shape("flow stages differ in length"));
    }
    let mut mu = vec![0.0; n];
    let mut sigma = vec![1.0; n];
    for t in 0..n {
        for (i, (m, _)) in stages.iter().enumerate() {
            let tail: f64 = stages[i + 1..].iter().map(|(_, s)| s[t]).product();
            mu[t] += m[t] * tail;
        }
        sigma[t] = stages.iter().map(|(_, s)| s[t]).product();
    }
    Ok((mu, sigma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveVaeConfig {
    pub sample_rate: u32,
    pub mel_bins: usize,
    /// Transposed-conv time strides; their product is the mel hop.
    pub upsample_strides: Vec<usize>,
    pub conditioner_freq_width: usize,
    pub channels: usize,
    pub filter: usize,
    pub dilation_cycle: usize,
    pub encoder_layers: usize,
    /// Layers per IAF flow, in application order.
    pub flow_layers: Vec<usize>,
    pub anneal: AnnealSchedule,
    pub stft: StftLossConfig,
}

impl WaveVaeConfig {
    pub fn full() -> Self {
        Self {
            sample_rate: 24_000,
            mel_bins: 80,
            upsample_strides: vec![15, 20],
            conditioner_freq_width: 3,
            channels: 64,
            filter: 3,
            dilation_cycle: 10,
            encoder_layers: 20,
            flow_layers: vec![10, 10, 10, 30],
            anneal: AnnealSchedule::full(),
            stft: StftLossConfig::default(),
        }
    }

    /// 1 kHz audio, hop 10, 16 mel bands.
    pub fn mini() -> Self {
        Self {
            sample_rate: 1000,
            mel_bins: 16,
            upsample_strides: vec![2, 5],
            channels: 16,
            encoder_layers: 3,
            flow_layers: vec![3, 3],
            anneal: AnnealSchedule::mini(),
            stft: StftLossConfig::mini(),
            ..Self::full()
        }
    }

    pub fn hop(&self) -> usize {
        self.upsample_strides.iter().product()
    }

    fn arnet(&self, layers: usize) -> ArNetConfig {
        ArNetConfig {
            layers,
            channels: self.channels,
            filter: self.filter,
            cycle: self.dilation_cycle,
            cond_channels: self.mel_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flow_layers.is_empty() || self.flow_layers.contains(&0) || self.encoder_layers == 0 {
            return Err(Error::config("WaveVAE needs at least one flow and non-empty networks"));
        }
        if self.upsample_strides.is_empty() || self.upsample_strides.contains(&0) {
            return Err(Error::config("upsampling strides must be positive"));
        }
        if !(self.anneal.temperature > 0.0) {
            return Err(Error::config("anneal temperature must be positive"));
        }
        self.stft.geometry(self.sample_rate)?;
        Ok(())
    }
}

/// Encoder, IAF flows, shared conditioner and the posterior noise scale.
#[derive(Debug, Clone)]
pub struct WaveVae<T> {
    pub conditioner: Conditioner<T>,
    pub encoder: GaussianArNet<T>,
    pub flows: Vec<GaussianArNet<T>>,
    /// `eps = exp(log_eps)`, starting at 1.
    pub log_eps: Tensor<T>,
    pub config: WaveVaeConfig,
}

impl_module!(WaveVae { conditioner, encoder, flows, log_eps });

/// Standard-normal draws for one loss evaluation, each of clip length.
#[derive(Debug, Clone)]
pub struct LossNoise<T> {
    pub posterior: Vec<T>,
    pub reconstruction: Vec<T>,
    pub prior: Vec<T>,
}

impl<T: Scalar> LossNoise<T> {
    pub fn draw<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut d = || (0..len).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect::<Vec<T>>();
        Self { posterior: d(), reconstruction: d(), prior: d() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WaveVaeLossVars<'g, T: Scalar> {
    pub recon: Var<'g, T>,
    /// Unweighted KL.
    pub kl: Var<'g, T>,
    pub stft_recon: Var<'g, T>,
    pub stft_prior: Var<'g, T>,
    pub total: Var<'g, T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveVaeLosses {
    pub recon: f64,
    pub kl_raw: f64,
    pub anneal: f64,
    /// `anneal * kl_raw`, the term entering `total`.
    pub kl: f64,
    pub stft_recon: f64,
    pub stft_prior: f64,
    pub total: f64,
}

/// Flow outputs along one path.
#[derive(Debug, Clone)]
pub struct FlowPath<'g, T: Scalar> {
    pub stats: Vec<ArStats<'g, T>>,
    pub output: Var<'g, T>,
    pub mu_tot: Var<'g, T>,
    pub sigma_tot: Var<'g, T>,
    /// `sum_i log sigma_i`
    pub log_sigma_tot: Var<'g, T>,
}

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_7;

impl<T: Scalar> WaveVae<T> {
    pub fn new<R: Rng + ?Sized>(config: &WaveVaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let conditioner = Conditioner::new(&config.upsample_strides, config.conditioner_freq_width, rng)?;
        let encoder = GaussianArNet::new(&config.arnet(config.encoder_layers), rng)?;
        let flows = config.flow_layers.iter().map(|&l| GaussianArNet::new(&config.arnet(l), rng)).collect::<Result<_>>()?;
        Ok(Self { conditioner, encoder, flows, log_eps: Tensor::param(vec![T::zero()], &[1])?, config: config.clone() })
    }

    pub fn epsilon(&self) -> T {
        self.log_eps.data()[0].exp()
    }

    /// Upsampled conditioning `[mel_bins, len]` from `[mel_bins, frames]`
    /// mel values; `len` may not exceed `frames * hop`.
    pub fn condition<'g>(&self, g: &'g Graph<T>, mel: &[T], frames: usize, len: usize) -> Result<Var<'g, T>> {
        let bins = self.config.mel_bins;
        if mel.len() != bins * frames {
            return Err(Error::shape(format!("conditioning has {} values for {bins} x {frames}", mel.len())));
        }
        if len == 0 || len > frames * self.conditioner.hop() {
            return Err(Error::shape(format!("{len} samples from {frames} frames at hop {}", self.conditioner.hop())));
        }
        let up = self.conditioner.forward(g, g.constant(mel.to_vec(), &[bins, frames])?)?;
        up.slice_cols(0, len)
    }

    /// `z = (x - mu(x_<t)) / sigma(x_<t) + eps * noise`; also returns the
    /// encoder statistics and the whitened residual.
    pub fn posterior_sample<'g>(
        &self,
        g: &'g Graph<T>,
        x: Var<'g, T>,
        cond: Var<'g, T>,
        noise: &[T],
    ) -> Result<(Var<'g, T>, ArStats<'g, T>, Var<'g, T>)> {
        let stats = self.encoder.forward(g, x, cond)?;
        let shape = x.shape();
        if noise.len() != x.numel() {
            return Err(Error::shape(format!("{} noise values for {} samples", noise.len(), x.numel())));
        }
        let delta = x.sub(stats.mu)?.div(stats.sigma)?;
        let eps = g.param(&self.log_eps).exp().broadcast(&shape)?;
        let z = delta.add(eps.mul(g.constant(noise.to_vec(), &shape)?)?)?;
        Ok((z, stats, delta))
    }

    /// Applies every flow in order starting from `z0`, accumulating the
    /// composed Gaussian on top of a standard base.
    pub fn flow_path<'g>(&self, g: &'g Graph<T>, z0: Var<'g, T>, cond: Var<'g, T>) -> Result<FlowPath<'g, T>> {
        let shape = z0.shape();
        let mut z = z0;
        let mut mu_tot = g.constant(vec![T::zero(); z0.numel()], &shape)?;
        let mut sigma_tot: Option<Var<'g, T>> = None;
        let mut log_sigma_tot: Option<Var<'g, T>> = None;
        let mut stats = Vec::with_capacity(self.flows.len());
        for flow in &self.flows {
            let s = flow.forward(g, z, cond)?;
            z = z.mul(s.sigma)?.add(s.mu)?;
            mu_tot = mu_tot.mul(s.sigma)?.add(s.mu)?;
            sigma_tot = Some(match sigma_tot {
                Some(acc) => acc.mul(s.sigma)?,
                None => s.sigma,
            });
            log_sigma_tot = Some(match log_sigma_tot {
                Some(acc) => acc.add(s.log_sigma)?,
                None => s.log_sigma,
            });
            stats.push(s);
        }
        Ok(FlowPath {
            stats,
            output: z,
            mu_tot,
            sigma_tot: sigma_tot.expect("validated flow count"),
            log_sigma_tot: log_sigma_tot.expect("validated flow count"),
        })
    }

    /// All ELBO and STFT terms for one clip. `mel` is `[mel_bins, frames]`.
    pub fn loss<'g>(
        &self,
        g: &'g Graph<T>,
        audio: &[T],
        mel: &[T],
        frames: usize,
        step: u64,
        noise: &LossNoise<T>,
    ) -> Result<(WaveVaeLossVars<'g, T>, WaveVaeLosses)> {
        let n = audio.len();
        if [&noise.posterior, &noise.reconstruction, &noise.prior].iter().any(|v| v.len() != n) {
            return Err(Error::shape("loss noise must match the clip length"));
        }
        let cond = self.condition(g, mel, frames, n)?;
        let x = g.constant(audio.to_vec(), &[1, n])?;
        let (z, _, delta) = self.posterior_sample(g, x, cond, &noise.posterior)?;
        let path = self.flow_path(g, z, cond)?;

        // -log N(x; mu_tot, sigma_tot), summed over samples
        let r = x.sub(path.mu_tot)?.div(path.sigma_tot)?;
        let recon = path.log_sigma_tot.add(r.square().scale(T::of(0.5)))?.offset(T::of(HALF_LN_TAU)).sum();

        let log_eps = g.param(&self.log_eps);
        let eps = log_eps.exp();
        let per_step = eps.square().offset(-T::one()).scale(T::of(0.5)).sub(log_eps)?;
        let kl = per_step.scale(T::of(n as f64)).add(delta.square().sum().scale(T::of(0.5)))?;

        let reconstruction = path
            .mu_tot
            .add(path.sigma_tot.mul(g.constant(noise.reconstruction.clone(), &[1, n])?)?)?;
        let stft_recon = stft_loss_var(reconstruction, x, &self.config.stft, self.config.sample_rate)?;
        let prior = self.flow_path(g, g.constant(noise.prior.clone(), &[1, n])?, cond)?;
        let stft_prior = stft_loss_var(prior.output, x, &self.config.stft, self.config.sample_rate)?;

        let anneal = self.config.anneal.weight(step);
        let total = recon.add(kl.scale(T::of(anneal)))?.add(stft_recon)?.add(stft_prior)?;
        let values = WaveVaeLosses {
            recon: recon.item().as_f64(),
            kl_raw: kl.item().as_f64(),
            anneal,
            kl: anneal * kl.item().as_f64(),
            stft_recon: stft_recon.item().as_f64(),
            stft_prior: stft_prior.item().as_f64(),
            total: total.item().as_f64(),
        };
        Ok((WaveVaeLossVars { recon, kl, stft_recon, stft_prior, total }, values))
    }

    /// Prior synthesis: standard-normal `noise` pushed through every flow,
    /// clipped to `[-1, 1]`.
    pub fn synthesize(&self, mel: &[T], frames: usize, noise: &[T]) -> Result<AudioClip<T>> {
        let g = Graph::new();
        let n = noise.len();
        let cond = self.condition(&g, mel, frames, n)?;
        let path = self.flow_path(&g, g.constant(noise.to_vec(), &[1, n])?, cond)?;
        let samples = path.output.value().into_iter().map(|v| v.clamp(-T::one(), T::one())).collect();
        AudioClip::new(samples, self.config.sample_rate)
    }

    /// [`Self::synthesize`] with noise drawn from `seed`, covering `frames * hop` samples.
    pub fn synthesize_seeded(&self, mel: &[T], frames: usize, seed: u64) -> Result<AudioClip<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = frames * self.conditioner.hop();
        let noise: Vec<T> = (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        self.synthesize(mel, frames, &noise)
    }
}

/// A training clip with its conditioning mel (`[mel_bins, frames]`).
#[derive(Debug, Clone)]
pub struct VaeExample<T> {
    pub audio: Vec<T>,
    pub mel: Vec<T>,
    pub frames: usize,
}

impl<T: Scalar> VaeExample<T> {
    /// Featurizes `audio` and keeps its normalized mel as conditioning.
    pub fn from_clip(audio: &AudioClip<T>, spec: &SpectrogramConfig, norm: &SpecNorm) -> Result<Self> {
        let (mel, _) = crate::dsp::features(audio, spec)?;
        Ok(Self { audio: audio.samples.clone(), mel: conditioning_mel(&mel, norm), frames: mel.frames })
    }
}

/// Normalized, channel-major (`[bins, frames]`) copy of a log mel spectrogram.
pub fn conditioning_mel<T: Scalar>(mel: &Spectrogram<T>, norm: &SpecNorm) -> Vec<T> {
    let mut out = vec![T::zero(); mel.values.len()];
    for f in 0..mel.frames {
        for b in 0..mel.bins {
            out[b * mel.frames + f] = norm.normalize(mel.values[f * mel.bins + b]);
        }
    }
    out
}

/// One Adam step on the summed loss of `batch`; noise comes from `rng`.
pub fn wavevae_train_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut WaveVae<T>,
    batch: &[VaeExample<T>],
    step: u64,
    opt: &mut OptimizerState<T>,
    rng: &mut R,
) -> Result<WaveVaeLosses> {
    if batch.is_empty() {
        return Err(Error::Empty("empty training batch".into()));
    }
    let g = Graph::new();
    let mut sum = WaveVaeLosses { recon: 0.0, kl_raw: 0.0, anneal: 0.0, kl: 0.0, stft_recon: 0.0, stft_prior: 0.0, total: 0.0 };
    let mut total: Option<Var<'_, T>> = None;
    for ex in batch {
        let noise = LossNoise::draw(ex.audio.len(), rng);
        let (vars, l) = model.loss(&g, &ex.audio, &ex.mel, ex.frames, step, &noise)?;
        sum.recon += l.recon;
        sum.kl_raw += l.kl_raw;
        sum.anneal = l.anneal;
        sum.kl += l.kl;
        sum.stft_recon += l.stft_recon;
        sum.stft_prior += l.stft_prior;
        sum.total += l.total;
        total = Some(match total {
            Some(acc) => acc.add(vars.total)?,
            None => vars.total,
        });
    }
    if !sum.total.is_finite() {
        log::error!("WaveVAE loss is not finite: {sum:?}");
        return Err(Error::NonFinite(format!("WaveVAE loss components {sum:?}")));
    }
    let grads = g.backward(total.expect("non-empty batch"))?;
    model.accumulate_grads(&grads)?;
    opt.adam_step(model)?;
    Ok(sum)
}
