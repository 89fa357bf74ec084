use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::nn::{CustomOp, Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Single-channel transposed 2-D convolution over a `[freq, time]` plane,
/// strided in time only. Frequency padding keeps the band count; the time
/// axis is cropped to exactly `time * stride`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    /// `[freq_width, time_width]`
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl_module!(ConvTranspose2d { kernel, bias });

impl<T: Scalar> ConvTranspose2d<T> {
    /// Time width is twice the stride, so each output sample mixes two
    /// input frames. Starts near a linear-interpolating upsampler.
    pub fn new<R: Rng + ?Sized>(stride: usize, freq_width: usize, rng: &mut R) -> Result<Self> {
        if stride == 0 || freq_width.is_multiple_of(2) {
            return Err(Error::config("transposed conv needs a positive stride and odd frequency width"));
        }
        let kt = 2 * stride;
        let centre = freq_width / 2;
        let mut data = Vec::with_capacity(freq_width * kt);
        for df in 0..freq_width {
            for _ in 0..kt {
                let base = if df == centre { 0.5 } else { 0.0 };
                data.push(T::of(base + 0.05 * (rng.random::<f64>() - 0.5)));
            }
        }
        Ok(Self {
            kernel: Tensor::param(data, &[freq_width, kt])?,
            bias: Tensor::param(vec![T::zero()], &[1])?,
            stride,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        conv_transpose2d(x, g.param(&self.kernel), g.param(&self.bias), self.stride)
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    f: usize,
    t_in: usize,
    kf: usize,
    kt: usize,
    stride: usize,
}

impl Geom {
    fn t_out(&self) -> usize {
        self.t_in * self.stride
    }

    /// Calls `visit(x_index, k_index, y_index)` for every multiply-add.
    fn each(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let (pf, t_out) = (self.kf / 2, self.t_out());
        for f in 0..self.f {
            for df in 0..self.kf {
                let Some(fo) = (f + df).checked_sub(pf).filter(|&fo| fo < self.f) else {
                    continue;
                };
                for t in 0..self.t_in {
                    for j in 0..self.kt {
                        let to = self.stride * t + j;
                        if to < t_out {
                            visit(f * self.t_in + t, df * self.kt + j, fo * t_out + to);
                        }
                    }
                }
            }
        }
    }
}

struct ConvT2dOp {
    geom: Geom,
}

impl<T: Scalar> CustomOp<T> for ConvT2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], gy: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, k) = (inputs[0], inputs[1]);
        let mut dx = vec![T::zero(); x.len()];
        let mut dk = vec![T::zero(); k.len()];
        self.geom.each(|xi, ki, yi| {
            dx[xi] += gy[yi] * k[ki];
            dk[ki] += gy[yi] * x[xi];
        });
        let db = gy.iter().fold(T::zero(), |a, &b| a + b);
        vec![Some(dx), Some(dk), Some(vec![db])]
    }
}

/// `x`: `[freq, time]`; `kernel`: `[kf, kt]`; `bias`: one value.
pub fn conv_transpose2d<'g, T: Scalar>(
    x: Var<'g, T>,
    kernel: Var<'g, T>,
    bias: Var<'g, T>,
    stride: usize,
) -> Result<Var<'g, T>> {
    let (xs, ks) = (x.shape(), kernel.shape());
    let (&[f, t_in], &[kf, kt]) = (&xs[..], &ks[..]) else {
        return Err(Error::shape(format!("conv_transpose2d on {xs:?} with kernel {ks:?}")));
    };
    if bias.numel() != 1 || stride == 0 || kf % 2 == 0 {
        return Err(Error::shape("conv_transpose2d needs one bias, a stride and an odd frequency width"));
    }
    let geom = Geom { f, t_in, kf, kt, stride };
    let b = bias.item();
    let mut y = vec![b; f * geom.t_out()];
    {
        let (xd, kd) = (x.data(), kernel.data());
        geom.each(|xi, ki, yi| y[yi] += xd[xi] * kd[ki]);
    }
    x.graph().custom(&[x, kernel, bias], y, &[f, geom.t_out()], Box::new(ConvT2dOp { geom }))
}

/// Upsamples `[bins, frames]` mel conditioning to `[bins, frames * hop]`
/// through transposed convolutions with leaky-ReLU activations.
#[derive(Debug, Clone)]
pub struct Conditioner<T> {
    pub layers: Vec<ConvTranspose2d<T>>,
}

impl_module!(Conditioner { layers });

pub const CONDITIONER_SLOPE: f64 = 0.4;

impl<T: Scalar> Conditioner<T> {
    pub fn new<R: Rng + ?Sized>(strides: &[usize], freq_width: usize, rng: &mut R) -> Result<Self> {
        if strides.is_empty() {
            return Err(Error::config("conditioner needs at least one layer"));
        }
        let layers = strides.iter().map(|&s| ConvTranspose2d::new(s, freq_width, rng)).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn hop(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, mel: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut h = mel;
        for layer in &self.layers {
            h = layer.forward(g, h)?.leaky_relu(T::of(CONDITIONER_SLOPE));
        }
        Ok(h)
    }
}
