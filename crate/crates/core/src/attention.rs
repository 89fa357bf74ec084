//! Positional encodings, dot-product attention, synthesis-time masking,
//! attention distillation and alignment diagnostics.

use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::export::matrix_csv;
use crate::impl_module;
use crate::nn::{Graph, Linear, Tensor, Var};
use crate::scalar::Scalar;

pub const DEFAULT_HIDDEN: usize = 128;
/// Added inside the log of the distillation loss.
pub const LOG_EPS: f64 = 1e-12;

/// Which index selects between sine and cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parity {
    /// Even channels use sine, odd channels cosine of the same frequency.
    #[default]
    ChannelParity,
    /// Even time steps use sine, odd time steps cosine; frequency exponent k/d.
    TimestepParity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalEncodingConfig {
    pub d: usize,
    pub omega: f64,
    pub parity: Parity,
}

impl PositionalEncodingConfig {
    pub fn new(d: usize, omega: f64) -> Self {
        Self { d, omega, parity: Parity::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || (self.parity == Parity::ChannelParity && !self.d.is_multiple_of(2)) {
            return Err(Error::config(format!("positional encoding needs an even channel count, got {}", self.d)));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::config(format!("position rate must be positive, got {}", self.omega)));
        }
        Ok(())
    }

    fn value(&self, k: usize, i: usize) -> f64 {
        let d = self.d as f64;
        let pos = self.omega * i as f64;
        match self.parity {
            Parity::ChannelParity => {
                let arg = pos / 10000f64.powf((k / 2 * 2) as f64 / d);
                if k.is_multiple_of(2) { arg.sin() } else { arg.cos() }
            }
            Parity::TimestepParity => {
                let arg = pos / 10000f64.powf(k as f64 / d);
                if i.is_multiple_of(2) { arg.sin() } else { arg.cos() }
            }
        }
    }
}

/// `[d, length]` encoding of time steps `0..length`.
pub fn positional_encoding<T: Scalar>(length: usize, cfg: &PositionalEncodingConfig) -> Result<Tensor<T>> {
    positional_encoding_from(0, length, cfg)
}

/// `[d, length]` encoding of time steps `start..start + length`.
pub fn positional_encoding_from<T: Scalar>(
    start: usize,
    length: usize,
    cfg: &PositionalEncodingConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut data = Vec::with_capacity(cfg.d * length);
    for k in 0..cfg.d {
        data.extend((start..start + length).map(|i| T::of(cfg.value(k, i))));
    }
    Tensor::new(data, &[cfg.d, length])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionRole {
    Query,
    TeacherKey,
    ParanetKeyTrain,
    ParanetKeySynth,
}

/// Average spectrogram frames per text token and the frame reduction factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionRates {
    pub frames_per_token: f64,
    pub reduction: usize,
}

impl Default for PositionRates {
    fn default() -> Self {
        Self { frames_per_token: 6.3, reduction: 4 }
    }
}

impl PositionRates {
    /// Reduced decoder steps per token, 6.3 / 4 by default.
    pub fn key_rate(&self) -> f64 {
        self.frames_per_token / self.reduction as f64
    }
}

/// Position rate for a role. `reduced_steps` and `text_len` are only read
/// for `ParanetKeyTrain`.
pub fn position_rate(role: PositionRole, reduced_steps: usize, text_len: usize, rates: &PositionRates) -> Result<f64> {
    match role {
        PositionRole::Query => Ok(1.0),
        PositionRole::TeacherKey | PositionRole::ParanetKeySynth => Ok(rates.key_rate()),
        PositionRole::ParanetKeyTrain => {
            if text_len == 0 || reduced_steps == 0 {
                return Err(Error::contract(format!(
                    "position rate needs positive lengths, got {reduced_steps} steps for {text_len} tokens"
                )));
            }
            Ok(reduced_steps as f64 / text_len as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub enabled: bool,
    pub window_back: usize,
    pub window_forward: usize,
    /// Tokens per decoder step, 4 / 6.3 by default.
    pub rate_ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { enabled: true, window_back: 3, window_forward: 3, rate_ratio: 4.0 / 6.3 }
    }
}

impl MaskConfig {
    pub fn from_rates(rates: &PositionRates) -> Self {
        Self { rate_ratio: rates.reduction as f64 / rates.frames_per_token, ..Self::default() }
    }
}

/// Target token for decoder step `i`, clamped to `[0, m - 1]`.
pub fn mask_center(i: usize, m: usize, cfg: &MaskConfig) -> usize {
    let c = (i as f64 * cfg.rate_ratio).round_ties_even();
    (c.max(0.0) as usize).min(m.saturating_sub(1))
}

/// Token indices decoder step `i` may attend to.
pub fn attention_mask(i: usize, m: usize, cfg: &MaskConfig) -> Range<usize> {
    if !cfg.enabled {
        return 0..m;
    }
    let c = mask_center(i, m, cfg);
    c.saturating_sub(cfg.window_back)..(c + cfg.window_forward + 1).min(m)
}

/// Row-major `[n, m]` mask, `true` where attention is allowed.
pub fn mask_matrix(n: usize, m: usize, cfg: &MaskConfig) -> Vec<bool> {
    let mut out = vec![false; n * m];
    for i in 0..n {
        for t in attention_mask(i, m, cfg) {
            out[i * m + t] = true;
        }
    }
    out
}

/// How the attention context is scaled by the number of keys `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextScale {
    /// `sqrt(1/M)`
    #[default]
    InvSqrtKeys,
    /// `sqrt(M)`
    SqrtKeys,
    Unscaled,
}

impl ContextScale {
    pub fn factor(self, m: usize) -> f64 {
        match self {
            ContextScale::InvSqrtKeys => (1.0 / m as f64).sqrt(),
            ContextScale::SqrtKeys => (m as f64).sqrt(),
            ContextScale::Unscaled => 1.0,
        }
    }
}

/// Attention weights of one block: `steps x tokens`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix<T> {
    pub weights: Vec<T>,
    pub steps: usize,
    pub tokens: usize,
    pub block: usize,
}

impl<T: Scalar> AlignmentMatrix<T> {
    pub fn new(weights: Vec<T>, steps: usize, tokens: usize, block: usize) -> Result<Self> {
        if steps == 0 || tokens == 0 || weights.len() != steps * tokens {
            return Err(Error::shape(format!("{} weights for a {steps} x {tokens} alignment", weights.len())));
        }
        Ok(Self { weights, steps, tokens, block })
    }

    pub fn from_var(v: Var<'_, T>, block: usize) -> Result<Self> {
        let shape = v.shape();
        let [n, m] = shape[..] else {
            return Err(Error::shape(format!("alignment must be 2-D, got {shape:?}")));
        };
        Self::new(v.value(), n, m, block)
    }

    pub fn row(&self, j: usize) -> &[T] {
        &self.weights[j * self.tokens..(j + 1) * self.tokens]
    }

    /// Argmax token of every decoder step.
    pub fn path(&self) -> Vec<usize> {
        (0..self.steps)
            .map(|j| {
                let row = self.row(j);
                (0..self.tokens).fold(0, |best, i| if row[i] > row[best] { i } else { best })
            })
            .collect()
    }

    /// CSV with a `t0,t1,...` header and one line per decoder step.
    pub fn to_csv(&self) -> String {
        let header: Vec<String> = (0..self.tokens).map(|i| format!("t{i}")).collect();
        format!("{}\n{}", header.join(","), matrix_csv(&self.weights, self.steps, self.tokens))
    }

    /// Writes `<stem>_block<k>.csv` and `<stem>_block<k>.pgm` into `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let base = dir.join(format!("{stem}_block{}", self.block));
        std::fs::write(base.with_extension("csv"), self.to_csv())?;
        crate::export::write_pgm(&base.with_extension("pgm"), &self.weights, self.steps, self.tokens)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<'g, T: Scalar> {
    /// `[d_out, N]`
    pub context: Var<'g, T>,
    /// `[N, M]`
    pub weights: Var<'g, T>,
}

/// Single-head dot-product attention with learned projections.
#[derive(Debug, Clone)]
pub struct AttentionBlock<T> {
    pub query_proj: Linear<T>,
    pub key_proj: Linear<T>,
    pub value_proj: Linear<T>,
    pub out_proj: Linear<T>,
    pub context_scale: ContextScale,
}

impl_module!(AttentionBlock { query_proj, key_proj, value_proj, out_proj });

impl<T: Scalar> AttentionBlock<T> {
    /// Query, key and value inputs of `d_query`, `d_key`, `d_value` channels,
    /// projected to `hidden` and mapped back out to `d_out`.
    pub fn new<R: Rng + ?Sized>(
        d_query: usize,
        d_key: usize,
        d_value: usize,
        d_out: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query_proj: Linear::new(d_query, hidden, rng),
            // a key bias shifts every score of a row equally, which softmax ignores
            key_proj: Linear::without_bias(d_key, hidden, rng),
            value_proj: Linear::new(d_value, hidden, rng),
            out_proj: Linear::new(hidden, d_out, rng),
            context_scale: ContextScale::default(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.query_proj.output_dim()
    }

    /// Copies the key projection into the query projection, so that at init
    /// scores contain the positional-encoding inner product `pe_q' W'W pe_k`.
    pub fn tie_query_key_init(&mut self) -> Result<()> {
        if self.query_proj.weight.shape() != self.key_proj.weight.shape() {
            return Err(Error::config(format!(
                "cannot tie query {:?} and key {:?} projections",
                self.query_proj.weight.shape(),
                self.key_proj.weight.shape()
            )));
        }
        self.query_proj.weight.assign(self.key_proj.weight.data().to_vec())
    }

    /// Projected keys and values, reusable across calls with the same encoder output.
    pub fn project_memory<'g>(
        &self,
        g: &'g Graph<T>,
        keys: Var<'g, T>,
        values: Var<'g, T>,
        pe_key: Option<Var<'g, T>>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let ks = keys.shape();
        let vs = values.shape();
        if ks.len() != 2 || vs.len() != 2 || ks[1] != vs[1] {
            return Err(Error::shape(format!("keys {ks:?} and values {vs:?} disagree on length")));
        }
        let keys = match pe_key {
            Some(pe) => add_pe(keys, pe, "key")?,
            None => keys,
        };
        Ok((self.key_proj.forward(g, keys)?, self.value_proj.forward(g, values)?))
    }

    /// `query` is `[d_q, N]`, `keys` `[d_k, M]`, `values` `[d_v, M]`; `mask`
    /// is row-major `[N, M]` with `true` for allowed entries.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        query: Var<'g, T>,
        keys: Var<'g, T>,
        values: Var<'g, T>,
        pe_query: Option<Var<'g, T>>,
        pe_key: Option<Var<'g, T>>,
        mask: Option<&[bool]>,
    ) -> Result<AttentionOutput<'g, T>> {
        let (k, v) = self.project_memory(g, keys, values, pe_key)?;
        self.attend(g, query, k, v, pe_query, mask)
    }

    /// Attention over memory already passed through [`Self::project_memory`].
    pub fn attend<'g>(
        &self,
        g: &'g Graph<T>,
        query: Var<'g, T>,
        keys_h: Var<'g, T>,
        values_h: Var<'g, T>,
        pe_query: Option<Var<'g, T>>,
        mask: Option<&[bool]>,
    ) -> Result<AttentionOutput<'g, T>> {
        let query = match pe_query {
            Some(pe) => add_pe(query, pe, "query")?,
            None => query,
        };
        let m = keys_h.shape()[1];
        let q = self.query_proj.forward(g, query)?;
        let scores = q.transpose()?.matmul(keys_h)?.scale(T::of(1.0 / (self.hidden() as f64).sqrt()));
        let weights = scores.softmax_rows(mask)?;
        let ctx = values_h.matmul(weights.transpose()?)?;
        let context = self.out_proj.forward(g, ctx)?.scale(T::of(self.context_scale.factor(m)));
        Ok(AttentionOutput { context, weights })
    }
}

fn add_pe<'g, T: Scalar>(x: Var<'g, T>, pe: Var<'g, T>, what: &str) -> Result<Var<'g, T>> {
    if x.shape() != pe.shape() {
        return Err(Error::shape(format!("{what} {:?} vs positional encoding {:?}", x.shape(), pe.shape())));
    }
    x.add(pe)
}

/// Mean cross-entropy of student alignments against a teacher alignment:
/// `-(1/(K N)) sum_k sum_j sum_i t[j,i] log(s_k[j,i] + 1e-12)`.
pub fn distillation_loss_var<'g, T: Scalar>(students: &[Var<'g, T>], teacher: &[T]) -> Result<Var<'g, T>> {
    let first = students.first().ok_or_else(|| Error::shape("distillation needs at least one student block"))?;
    let shape = first.shape();
    let [n, _] = shape[..] else {
        return Err(Error::shape(format!("alignment must be 2-D, got {shape:?}")));
    };
    if teacher.len() != first.numel() {
        return Err(Error::shape(format!("teacher has {} weights, student {:?}", teacher.len(), shape)));
    }
    let g = first.graph();
    let t = g.constant(teacher.to_vec(), &shape)?;
    let mut total: Option<Var<'g, T>> = None;
    for s in students {
        if s.shape() != shape {
            return Err(Error::shape(format!("student block {:?} vs {:?}", s.shape(), shape)));
        }
        let ce = s.offset(T::of(LOG_EPS)).ln().mul(t)?.sum();
        total = Some(match total {
            Some(acc) => acc.add(ce)?,
            None => ce,
        });
    }
    let scale = -1.0 / (students.len() * n) as f64;
    Ok(total.expect("non-empty").scale(T::of(scale)))
}

/// Value form of [`distillation_loss_var`].
pub fn attention_distillation_loss<T: Scalar>(students: &[AlignmentMatrix<T>], teacher: &AlignmentMatrix<T>) -> Result<f64> {
    if students.is_empty() {
        return Err(Error::shape("distillation needs at least one student block"));
    }
    let mut total = 0.0;
    for s in students {
        if (s.steps, s.tokens) != (teacher.steps, teacher.tokens) {
            return Err(Error::shape(format!(
                "student {}x{} vs teacher {}x{}",
                s.steps, s.tokens, teacher.steps, teacher.tokens
            )));
        }
        total += s
            .weights
            .iter()
            .zip(&teacher.weights)
            .map(|(&w, &t)| t.as_f64() * (w.as_f64() + LOG_EPS).ln())
            .sum::<f64>();
    }
    Ok(-total / (students.len() * teacher.steps) as f64)
}

/// Tokens within this distance of some argmax count as covered.
pub const COVER_RADIUS: usize = 1;
/// Backward argmax jumps of at least this many tokens count as repeats.
pub const REPEAT_JUMP: usize = 2;
/// Half-width of the diagonal band as a fraction of the token count.
pub const DIAGONAL_BAND: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentDiagnostics {
    pub skip_count: usize,
    pub repeat_count: usize,
    pub focus_rate: f64,
    pub diagonal_rate: f64,
}

/// Automated error counts for one alignment. `exempt[i]` marks tokens (such
/// as pauses) that are not counted as skipped when never attended.
pub fn alignment_diagnostics<T: Scalar>(w: &AlignmentMatrix<T>, exempt: Option<&[bool]>) -> AlignmentDiagnostics {
    let (n, m) = (w.steps, w.tokens);
    let path = w.path();
    let mut covered = vec![false; m];
    for &p in &path {
        for c in &mut covered[p.saturating_sub(COVER_RADIUS)..(p + COVER_RADIUS + 1).min(m)] {
            *c = true;
        }
    }
    let skip_count = (0..m).filter(|&i| !covered[i] && !exempt.is_some_and(|e| e.get(i) == Some(&true))).count();
    let repeat_count = path.windows(2).filter(|p| p[1] + REPEAT_JUMP <= p[0]).count();
    let focus_rate = (0..n)
        .map(|j| w.row(j).iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64())))
        .sum::<f64>()
        / n as f64;
    let band = DIAGONAL_BAND * m as f64;
    let on_diagonal = path
        .iter()
        .enumerate()
        .filter(|&(j, &p)| (p as f64 - j as f64 * m as f64 / n as f64).abs() <= band)
        .count();
    AlignmentDiagnostics { skip_count, repeat_count, focus_rate, diagonal_rate: on_diagonal as f64 / n as f64 }
}

/// Mean over decoder steps of the row entropy, with `0 log 0 = 0`.
pub fn attention_entropy<T: Scalar>(w: &AlignmentMatrix<T>) -> f64 {
    let total: f64 = w
        .weights
        .iter()
        .map(|v| v.as_f64())
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    total / w.steps as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_examples() {
        let cfg = PositionalEncodingConfig::new(4, 1.0);
        let pe = positional_encoding::<f64>(3, &cfg).unwrap();
        let col = |i: usize| (0..4).map(|k| pe.at2(k, i)).collect::<Vec<_>>();
        assert_eq!(col(0), [0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at2(0, 1) - 0.8414709848078965).abs() < 1e-15);
        assert!((pe.at2(2, 1) - 0.009999833334166664).abs() < 1e-15);
        assert!(PositionalEncodingConfig::new(3, 1.0).validate().is_err());
        assert!(PositionalEncodingConfig::new(4, 0.0).validate().is_err());
    }

    #[test]
    fn pe_offset_matches_slice() {
        let cfg = PositionalEncodingConfig::new(6, 1.575);
        let full = positional_encoding::<f64>(10, &cfg).unwrap();
        let part = positional_encoding_from::<f64>(4, 3, &cfg).unwrap();
        for k in 0..6 {
            for i in 0..3 {
                assert_eq!(part.at2(k, i), full.at2(k, i + 4));
            }
        }
    }

    #[test]
    fn timestep_parity_switches_on_time_index() {
        let cfg = PositionalEncodingConfig { d: 4, omega: 1.0, parity: Parity::TimestepParity };
        let pe = positional_encoding::<f64>(2, &cfg).unwrap();
        assert_eq!(pe.at2(1, 0), 0.0);
        assert!((pe.at2(1, 1) - (1.0 / 10f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn position_rates() {
        let r = PositionRates::default();
        assert_eq!(position_rate(PositionRole::Query, 0, 0, &r).unwrap(), 1.0);
        assert!((position_rate(PositionRole::TeacherKey, 0, 0, &r).unwrap() - 1.575).abs() < 1e-12);
        assert!((position_rate(PositionRole::ParanetKeySynth, 0, 0, &r).unwrap() - 1.575).abs() < 1e-12);
        assert!((position_rate(PositionRole::ParanetKeyTrain, 63, 40, &r).unwrap() - 1.575).abs() < 1e-12);
        assert!(matches!(position_rate(PositionRole::ParanetKeyTrain, 63, 0, &r), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_examples() {
        let cfg = MaskConfig::default();
        assert_eq!(attention_mask(0, 41, &cfg), 0..4);
        assert_eq!(attention_mask(10, 41, &cfg), 3..10);
        assert_eq!(attention_mask(63, 41, &cfg), 37..41);
        assert_eq!(attention_mask(500, 1, &cfg), 0..1);
        let off = MaskConfig { enabled: false, ..cfg };
        assert_eq!(attention_mask(10, 41, &off), 0..41);
    }

    #[test]
    fn path_and_diagnostics_examples() {
        let m = 3;
        let path = [0usize, 1, 2, 0, 1];
        let mut w = vec![0.0f64; path.len() * m];
        for (j, &p) in path.iter().enumerate() {
            w[j * m + p] = 1.0;
        }
        let a = AlignmentMatrix::new(w, path.len(), m, 0).unwrap();
        assert_eq!(a.path(), path);
        let d = alignment_diagnostics(&a, None);
        assert_eq!(d.repeat_count, 1);
        assert_eq!(d.skip_count, 0);
        assert_eq!(d.focus_rate, 1.0);
    }

    #[test]
    fn csv_has_header() {
        let a = AlignmentMatrix::new(vec![0.25f64, 0.75], 1, 2, 3).unwrap();
        assert_eq!(a.to_csv(), "t0,t1\n0.25,0.75\n");
    }
}
