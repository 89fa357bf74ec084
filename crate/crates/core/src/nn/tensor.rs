use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::Gradients;
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Tensor`], used to route gradients back
/// from a [`Graph`](crate::nn::Graph) to the parameter that was bound into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major array with an optional accumulated gradient.
///
/// Tensors are the persistent carriers (parameters, spectrograms, audio).
/// Computation happens on a [`Graph`](crate::nn::Graph), which copies tensor
/// values in and hands gradients back through [`Gradients`].
#[derive(Debug)]
pub struct Tensor<T> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Clone> Clone for Tensor<T> {
    /// Clones get a fresh identity so gradients never alias.
    fn clone(&self) -> Self {
        Self {
            id: TensorId::fresh(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self {
            id: TensorId::fresh(),
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(vec![T::zero(); n], shape).expect("zeros shape is consistent")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new(vec![value; n], shape).expect("full shape is consistent")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![value], &[1]).expect("scalar shape")
    }

    /// Trainable tensor.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let mut t = Self::new(data, shape)?;
        t.requires_grad = true;
        Ok(t)
    }

    /// Glorot-uniform kernel: entries in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-limit..=limit))).collect();
        Self::param(data, shape).expect("glorot shape is consistent")
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient (allocating it on first use).
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Replaces the contents in place, keeping identity. Used by checkpoint loading.
    pub fn assign(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::shape(format!(
                "assigning {} values to tensor of shape {:?}",
                data.len(),
                self.shape
            )));
        }
        self.data = data;
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.data.len())?;
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a 2-D index.
    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Transposed copy of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!("transpose of shape {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(out, &[c, r])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!("dimensions must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(format!("shape {shape:?} holds {n} values, data has {len}")));
    }
    Ok(())
}

/// Parameter container. Implementors enumerate their tensors under stable
/// dotted names, which drive optimizer state, checkpoints and parameter counts.
pub trait Module<T: Scalar> {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    fn set_requires_grad(&mut self, on: bool) {
        self.visit_mut("", &mut |_, t| t.set_requires_grad(on));
    }

    /// Moves gradients computed on a graph into the parameters' `grad` fields.
    fn accumulate_grads(&mut self, grads: &Gradients<T>) -> Result<()> {
        let mut res = Ok(());
        self.visit_mut("", &mut |_, t| {
            if res.is_err() || !t.requires_grad() {
                return;
            }
            if let Some(g) = grads.for_tensor(t.id()) {
                res = t.accumulate_grad(g);
            }
        });
        res
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.is_finite());
        ok
    }
}

pub fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

impl<T: Scalar> Module<T> for Tensor<T> {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(path, self)
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(path, self)
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(path, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(path, &i.to_string()), f);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(m) = self {
            m.visit(path, f);
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(m) = self {
            m.visit_mut(path, f);
        }
    }
}

/// Implements [`Module`] for a struct generic over `T` by visiting the listed fields.
#[macro_export]
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::Scalar> $crate::nn::Module<T> for $ty<T> {
            fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &$crate::nn::Tensor<T>)) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join_path(path, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut $crate::nn::Tensor<T>)) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join_path(path, stringify!($field)), f); )*
            }
        }
    };
}
