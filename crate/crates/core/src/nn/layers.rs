use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Causality {
    Causal,
    NonCausal,
}

/// Training/inference switch plus the random stream used by dropout.
pub struct ForwardCtx {
    pub training: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn train(seed: u64) -> Self {
        Self { training: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn inference() -> Self {
        Self { training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Inverted dropout: kept units are scaled by `1/keep` during training.
pub fn dropout<'g, T: Scalar>(x: Var<'g, T>, keep: f64, ctx: &mut ForwardCtx) -> Result<Var<'g, T>> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::config(format!("dropout keep probability {keep} outside (0, 1]")));
    }
    if !ctx.training || keep >= 1.0 {
        return Ok(x);
    }
    let scale = T::of(1.0 / keep);
    let mask = (0..x.numel())
        .map(|_| if ctx.rng.random::<f64>() < keep { scale } else { T::zero() })
        .collect();
    let mask = x.graph().constant(mask, &x.shape())?;
    x.mul(mask)
}

/// Gated linear unit over the channel axis: `a * sigmoid(b)` where `a` and
/// `b` are the first and second halves of the rows.
pub fn glu<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = x.shape();
    if shape.len() != 2 || !shape[0].is_multiple_of(2) {
        return Err(Error::shape(format!("glu needs an even channel count, got {shape:?}")));
    }
    let c = shape[0] / 2;
    let a = x.slice_rows(0, c)?;
    let b = x.slice_rows(c, c)?;
    a.mul(b.sigmoid())
}

/// Position-wise affine map `W x + b` applied to `[in, T]` inputs.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl_module!(Linear { weight, bias });

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::glorot(&[output, input], input, output, rng),
            bias: Some(Tensor::param(vec![T::zero(); output], &[output]).expect("bias shape")),
        }
    }

    pub fn without_bias<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self { weight: Tensor::glorot(&[output, input], input, output, rng), bias: None }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = g.param(&self.weight).matmul(x)?;
        match &self.bias {
            Some(b) => y.add_bias(g.param(b)),
            None => Ok(y),
        }
    }
}

/// 1-D convolution with bias. Kernels are `[c_out, c_in, width]`.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub causality: Causality,
    pub dilation: usize,
}

impl_module!(Conv1d { kernel, bias });

impl<T: Scalar> Conv1d<T> {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        width: usize,
        causality: Causality,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let kernel = Tensor::glorot(&[c_out, c_in, width], c_in * width, c_out * width, rng);
        let bias = Tensor::param(vec![T::zero(); c_out], &[c_out])?;
        Self::from_parts(kernel, bias, causality, dilation)
    }

    pub fn from_parts(kernel: Tensor<T>, bias: Tensor<T>, causality: Causality, dilation: usize) -> Result<Self> {
        let [c_out, _, width] = kernel.shape()[..] else {
            return Err(Error::shape(format!("conv kernel must be 3-D, got {:?}", kernel.shape())));
        };
        if width == 0 || dilation == 0 {
            return Err(Error::config("kernel width and dilation must be at least 1"));
        }
        if causality == Causality::NonCausal && width % 2 == 0 {
            return Err(Error::config(format!("non-causal convolution needs an odd width, got {width}")));
        }
        if bias.numel() != c_out {
            return Err(Error::shape(format!("bias of {} for {c_out} output channels", bias.numel())));
        }
        Ok(Self { kernel, bias, causality, dilation })
    }

    pub fn width(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn pad_left(&self) -> usize {
        let span = (self.width() - 1) * self.dilation;
        match self.causality {
            Causality::Causal => span,
            Causality::NonCausal => span / 2,
        }
    }

    /// Number of past steps (including the current one) a causal output sees.
    pub fn receptive_field(&self) -> usize {
        (self.width() - 1) * self.dilation + 1
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv1d(g.param(&self.kernel), self.dilation, self.pad_left())?
            .add_bias(g.param(&self.bias))
    }
}

/// Residual gated convolution block: `(glu(conv(dropout(x))) + x) * scale`.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv1d<T>,
    pub keep: f64,
    pub residual_scale: T,
}

impl_module!(ConvBlock { conv });

impl<T: Scalar> ConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        width: usize,
        causality: Causality,
        dilation: usize,
        keep: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv1d::new(channels, 2 * channels, width, causality, dilation, rng)?;
        Self::from_conv(conv, keep)
    }

    pub fn from_conv(conv: Conv1d<T>, keep: f64) -> Result<Self> {
        if conv.out_channels() != 2 * conv.in_channels() {
            return Err(Error::shape(format!(
                "gated block needs 2c output channels for c inputs, got {} -> {}",
                conv.in_channels(),
                conv.out_channels()
            )));
        }
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::config(format!("dropout keep probability {keep} outside (0, 1]")));
        }
        Ok(Self { conv, keep, residual_scale: T::of(0.5f64.sqrt()) })
    }

    pub fn channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, ctx: &mut ForwardCtx) -> Result<Var<'g, T>> {
        let h = dropout(x, self.keep, ctx)?;
        let h = glu(self.conv.forward(g, h)?)?;
        Ok(h.add(x)?.scale(self.residual_scale))
    }
}

/// Token embedding table `[vocab, dim]`; lookups produce `[dim, len]`.
#[derive(Debug, Clone)]
pub struct Embedding<T> {
    pub table: Tensor<T>,
}

impl_module!(Embedding { table });

impl<T: Scalar> Embedding<T> {
    /// Entries drawn from N(0, 0.1²).
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let data = (0..vocab * dim).map(|_| T::of(normal.sample(rng))).collect();
        Self { table: Tensor::param(data, &[vocab, dim]).expect("embedding shape") }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, ids: &[usize]) -> Result<Var<'g, T>> {
        g.param(&self.table).embed(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;

    fn conv_1ch(taps: &[f64], causality: Causality) -> Conv1d<f64> {
        let k = Tensor::param(taps.to_vec(), &[1, 1, taps.len()]).unwrap();
        let b = Tensor::param(vec![0.0], &[1]).unwrap();
        Conv1d::from_parts(k, b, causality, 1).unwrap()
    }

    fn run(conv: &Conv1d<f64>, x: &[f64]) -> Vec<f64> {
        let g = Graph::new();
        let xv = g.constant(x.to_vec(), &[1, x.len()]).unwrap();
        conv.forward(&g, xv).unwrap().value()
    }

    #[test]
    fn conv1d_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(run(&conv_1ch(&[0.0, 0.0, 1.0], Causality::Causal), &x), x);
        assert_eq!(run(&conv_1ch(&[1.0, 1.0, 1.0], Causality::Causal), &x), [1.0, 3.0, 6.0, 9.0]);
        assert_eq!(run(&conv_1ch(&[1.0, 1.0, 1.0], Causality::NonCausal), &x), [3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn even_noncausal_width_is_config_error() {
        let k = Tensor::<f64>::param(vec![1.0; 2], &[1, 1, 2]).unwrap();
        let b = Tensor::param(vec![0.0], &[1]).unwrap();
        let err = Conv1d::from_parts(k, b, Causality::NonCausal, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn conv1d_channel_mismatch() {
        let conv = conv_1ch(&[1.0], Causality::Causal);
        let g = Graph::new();
        let x = g.constant(vec![0.0; 8], &[2, 4]).unwrap();
        assert!(matches!(conv.forward(&g, x), Err(Error::Shape(_))));
    }

    #[test]
    fn glu_examples() {
        let g = Graph::<f64>::new();
        let x = g.constant(vec![1.0, 2.0, 0.0, 0.0], &[2, 2]).unwrap();
        assert_eq!(glu(x).unwrap().value(), [0.5, 1.0]);
        let x = g.constant(vec![3.0, 40.0], &[2, 1]).unwrap();
        assert!((glu(x).unwrap().item() - 3.0).abs() < 1e-9);
        let x = g.constant(vec![1.0, 1.0], &[2, 1]).unwrap();
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((glu(x).unwrap().item() - want).abs() < 1e-15);
        let x = g.constant(vec![1.0; 3], &[3, 1]).unwrap();
        assert!(matches!(glu(x), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_block_zero_kernel_scales_input() {
        let k = Tensor::param(vec![0.0; 4 * 2 * 3], &[4, 2, 3]).unwrap();
        let b = Tensor::param(vec![0.0; 4], &[4]).unwrap();
        let block = ConvBlock::from_conv(Conv1d::from_parts(k, b, Causality::Causal, 1).unwrap(), 1.0).unwrap();
        let g = Graph::new();
        let xs = vec![0.3, -1.0, 2.0, 0.5, 0.25, -4.0];
        let x = g.constant(xs.clone(), &[2, 3]).unwrap();
        let y = block.forward(&g, x, &mut ForwardCtx::inference()).unwrap().value();
        for (a, b) in y.iter().zip(&xs) {
            assert_eq!(*a, b * 0.5f64.sqrt());
        }
    }

    #[test]
    fn conv_block_identity_gate() {
        // a-half copies the input through the current tap, b-half saturates the gate.
        let c = 2;
        let mut k = vec![0.0; 2 * c * c * 3];
        for i in 0..c {
            k[(i * c + i) * 3 + 2] = 1.0;
        }
        let bias = vec![0.0, 0.0, 40.0, 40.0];
        let conv = Conv1d::from_parts(
            Tensor::param(k, &[2 * c, c, 3]).unwrap(),
            Tensor::param(bias, &[2 * c]).unwrap(),
            Causality::Causal,
            1,
        )
        .unwrap();
        let block = ConvBlock::from_conv(conv, 1.0).unwrap();
        let g = Graph::new();
        let xs = vec![1.0, -2.0, 0.5, 3.0];
        let x = g.constant(xs.clone(), &[2, 2]).unwrap();
        let y = block.forward(&g, x, &mut ForwardCtx::inference()).unwrap().value();
        for (a, b) in y.iter().zip(&xs) {
            assert!((a - 2.0 * b * 0.5f64.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ConvBlock::<f64>::new(4, 3, Causality::NonCausal, 1, 0.95, &mut rng).unwrap();
        let xs: Vec<f64> = (0..4 * 50).map(|i| (i as f64 * 0.37).sin()).collect();
        let eval = |ctx: &mut ForwardCtx| {
            let g = Graph::new();
            let x = g.constant(xs.clone(), &[4, 50]).unwrap();
            block.forward(&g, x, ctx).unwrap().value()
        };
        let a = eval(&mut ForwardCtx::inference());
        let b = eval(&mut ForwardCtx::inference());
        let t = eval(&mut ForwardCtx::train(3));
        assert_eq!(a, b);
        assert_ne!(a, t);
    }

    #[test]
    fn module_names_are_dotted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blocks: Vec<ConvBlock<f64>> =
            (0..2).map(|_| ConvBlock::new(2, 3, Causality::Causal, 1, 1.0, &mut rng).unwrap()).collect();
        assert_eq!(
            blocks.param_names(),
            ["0.conv.kernel", "0.conv.bias", "1.conv.kernel", "1.conv.bias"]
        );
        assert_eq!(blocks.num_params(), 2 * (4 * 2 * 3 + 4));
    }
}
