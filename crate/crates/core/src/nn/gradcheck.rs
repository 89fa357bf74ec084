//! Finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{Module, Tensor};
use crate::scalar::Scalar;

pub const STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn eval<T: Scalar, F>(f: &F, xs: &[Vec<T>], shapes: &[Vec<usize>]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let vars = xs
        .iter()
        .zip(shapes)
        .map(|(x, s)| g.constant(x.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let y = f(&g, &vars)?;
    if y.numel() != 1 {
        return Err(Error::contract("grad_check needs a scalar-valued function"));
    }
    let v = y.item().as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v} during gradient check")));
    }
    Ok(v)
}

/// Maximum relative error between analytic and central-difference gradients
/// of `f` with respect to every element of every input.
pub fn grad_check_many<T: Scalar, F>(f: F, inputs: &[Tensor<T>]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let mut xs: Vec<Vec<T>> = inputs.iter().map(|t| t.data().to_vec()).collect();

    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let vars = xs
            .iter()
            .zip(&shapes)
            .map(|(x, s)| g.variable(x.clone(), s))
            .collect::<Result<Vec<_>>>()?;
        let y = f(&g, &vars)?;
        if !y.item().is_finite() {
            return Err(Error::NonFinite(format!("function value {} during gradient check", y.item())));
        }
        let grads = g.backward(y)?;
        vars.iter()
            .map(|v| match grads.wrt(*v) {
                Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; v.numel()],
            })
            .collect()
    };

    let h = T::of(STEP);
    let mut worst = 0.0f64;
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k][i];
            xs[k][i] = orig + h;
            let up = eval(&f, &xs, &shapes)?;
            xs[k][i] = orig - h;
            let down = eval(&f, &xs, &shapes)?;
            xs[k][i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<T: Scalar, F>(f: F, x: &Tensor<T>) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<T>, Var<'g, T>) -> Result<Var<'g, T>>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x))
}

/// Checks gradients of a scalar function with respect to a module's
/// trainable parameters. `stride` > 1 samples every `stride`-th element of
/// each parameter to bound cost on larger modules.
pub fn grad_check_params<T: Scalar, M, F>(model: &mut M, f: F, stride: usize) -> Result<f64>
where
    M: Module<T>,
    F: for<'g> Fn(&'g Graph<T>, &M) -> Result<Var<'g, T>>,
{
    grad_check_params_step(model, f, stride, STEP)
}

/// [`grad_check_params`] with an explicit central-difference step. Losses
/// summed over many samples need a larger step: roundoff in the difference
/// grows with the loss magnitude while the gradients stay small.
pub fn grad_check_params_step<T: Scalar, M, F>(model: &mut M, f: F, stride: usize, step: f64) -> Result<f64>
where
    M: Module<T>,
    F: for<'g> Fn(&'g Graph<T>, &M) -> Result<Var<'g, T>>,
{
    let stride = stride.max(1);
    let run = |m: &M| -> Result<f64> {
        let g = Graph::new();
        let v = f(&g, m)?.item().as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v} during gradient check")));
        }
        Ok(v)
    };

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    {
        let g = Graph::new();
        let y = f(&g, model)?;
        if y.numel() != 1 {
            return Err(Error::contract("grad_check needs a scalar-valued function"));
        }
        let grads = g.backward(y)?;
        model.visit("", &mut |name, t| {
            if t.requires_grad() {
                let a = match grads.for_tensor(t.id()) {
                    Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
                    None => vec![0.0; t.numel()],
                };
                analytic.push((name.to_string(), a));
            }
        });
    }

    let h = T::of(step);
    let mut worst = 0.0f64;
    for (name, a) in &analytic {
        for i in (0..a.len()).step_by(stride) {
            let mut orig = T::zero();
            let mut set = |m: &mut M, delta: Option<T>| {
                m.visit_mut("", &mut |n, t| {
                    if n == name {
                        match delta {
                            Some(d) => {
                                orig = t.data()[i];
                                t.data_mut()[i] = orig + d;
                            }
                            None => t.data_mut()[i] = orig,
                        }
                    }
                })
            };
            set(model, Some(h));
            let up = run(model);
            set(model, None);
            set(model, Some(-h));
            let down = run(model);
            set(model, None);
            let numeric = (up? - down?) / (2.0 * step);
            worst = worst.max(rel_err(a[i], numeric));
        }
    }
    Ok(worst)
}
