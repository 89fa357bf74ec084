use paranet_core::nn::{
    glu, grad_check, grad_check_many, grad_check_params, Causality, Conv1d, ConvBlock, ForwardCtx, Graph, Module,
    OptimizerState, Tensor, Var,
};
use paranet_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn block_loss<'g>(g: &'g Graph<f64>, x: Var<'g, f64>, b: &ConvBlock<f64>, target: &Tensor<f64>) -> Result<Var<'g, f64>> {
    let y = b.forward(g, x, &mut ForwardCtx::inference())?;
    let p = y.softmax_rows(None)?;
    Ok(p.mul(g.constant(target.data().to_vec(), target.shape())?)?.sum())
}

#[test]
fn conv_block_softmax_chain_gradients() {
    let cases = [(2, 5, 3, Causality::Causal), (3, 7, 5, Causality::NonCausal), (4, 4, 3, Causality::NonCausal)];
    for (seed, (c, t, w, causality)) in cases.into_iter().enumerate() {
        let seed = seed as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block = ConvBlock::<f64>::new(c, w, causality, 1 + seed as usize % 2, 1.0, &mut rng).unwrap();
        let x = random(&[c, t], 100 + seed);
        let target = random(&[c, t], 200 + seed);

        let err_x = grad_check(|g, xv| block_loss(g, xv, &block, &target), &x).unwrap();
        assert!(err_x < 1e-4, "input gradient error {err_x}");

        let err_p = grad_check_params(
            &mut block,
            |g, b| {
                let xv = g.constant(x.data().to_vec(), x.shape())?;
                block_loss(g, xv, b, &target)
            },
            1,
        )
        .unwrap();
        assert!(err_p < 1e-4, "parameter gradient error {err_p}");
    }
}

#[test]
fn elementwise_and_matrix_ops_gradients() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let err = grad_check_many(
        |_, v| {
            let m = v[0].matmul(v[1])?.tanh();
            let e = v[0].transpose()?.slice_cols(1, 2)?.exp();
            m.square().sum().add(e.sum())
        },
        &[a, b],
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let pos = Tensor::new(vec![0.5, 1.5, 2.0, 0.7], &[2, 2]).unwrap();
    let err = grad_check(
        |g, v| {
            let d = g.constant(vec![1.0, -2.0, 0.3, 4.0], &[2, 2])?;
            Ok(v.ln().add(v.sqrt())?.div(d)?.add(v.shift_cols(1)?)?.norm2())
        },
        &pos,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn embedding_gradient_reaches_used_rows_only() {
    let table = random(&[5, 3], 9);
    let g = Graph::new();
    let t = g.variable(table.data().to_vec(), &[5, 3]).unwrap();
    let loss = t.embed(&[1, 3, 1]).unwrap().square().sum();
    let grads = g.backward(loss).unwrap();
    let gr = grads.wrt(t).unwrap();
    for row in [0, 2, 4] {
        assert!(gr[row * 3..row * 3 + 3].iter().all(|&v| v == 0.0));
    }
    let err = grad_check(|_, v| Ok(v.embed(&[1, 3, 1])?.square().sum()), &table).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn embedding_out_of_range_is_contract_error() {
    let g = Graph::<f64>::new();
    let t = g.constant(vec![0.0; 6], &[2, 3]).unwrap();
    assert!(matches!(t.embed(&[2]), Err(paranet_core::Error::Contract(_))));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut p = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    for _ in 0..2 {
        let g = Graph::new();
        let loss = g.param(&p).scale(3.0).sum();
        let grads = g.backward(loss).unwrap();
        p.accumulate_grads(&grads).unwrap();
    }
    assert_eq!(p.grad().unwrap(), &[6.0, 6.0]);
    p.zero_grad();
    assert!(p.grad().is_none());
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut block = ConvBlock::<f64>::new(3, 3, Causality::Causal, 1, 0.9, &mut rng).unwrap();
        let x = random(&[3, 6], 6);
        let mut opt = OptimizerState::new(0.01);
        let mut ctx = ForwardCtx::train(7);
        for _ in 0..5 {
            let g = Graph::new();
            let xv = g.constant(x.data().to_vec(), &[3, 6]).unwrap();
            let loss = block.forward(&g, xv, &mut ctx).unwrap().square().mean();
            let grads = g.backward(loss).unwrap();
            block.accumulate_grads(&grads).unwrap();
            opt.adam_step(&mut block).unwrap();
        }
        block.conv.kernel.data().to_vec()
    };
    assert_eq!(run(), run());
}

fn conv_out(conv: &Conv1d<f64>, x: &[f64], c: usize) -> Vec<f64> {
    let g = Graph::new();
    let xv = g.constant(x.to_vec(), &[c, x.len() / c]).unwrap();
    conv.forward(&g, xv).unwrap().value()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn causal_conv_ignores_future(seed in 0u64..1000, t in 2usize..20, w in 1usize..5, dil in 1usize..3, at in 0usize..20) {
        let at = at % t;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Conv1d::<f64>::new(2, 3, w, Causality::Causal, dil, &mut rng).unwrap();
        let x = random(&[2, t], seed + 1).into_data();
        let mut y = x.clone();
        y[at] += 1.0;
        y[t + at] -= 0.5;
        let (a, b) = (conv_out(&conv, &x, 2), conv_out(&conv, &y, 2));
        for ch in 0..3 {
            for s in 0..at {
                prop_assert_eq!(a[ch * t + s], b[ch * t + s]);
            }
        }
    }

    #[test]
    fn noncausal_conv_is_local(seed in 0u64..1000, t in 2usize..24, half in 0usize..3, dil in 1usize..3, at in 0usize..24) {
        let at = at % t;
        let w = 2 * half + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Conv1d::<f64>::new(1, 2, w, Causality::NonCausal, dil, &mut rng).unwrap();
        let x = random(&[1, t], seed + 1).into_data();
        let mut y = x.clone();
        y[at] += 1.0;
        let (a, b) = (conv_out(&conv, &x, 1), conv_out(&conv, &y, 1));
        for ch in 0..2 {
            for s in 0..t {
                if s.abs_diff(at) > half * dil {
                    prop_assert_eq!(a[ch * t + s], b[ch * t + s]);
                }
            }
        }
    }

    #[test]
    fn glu_is_bounded_by_linear_half(vals in proptest::collection::vec(-50.0f64..50.0, 2..40)) {
        let n = vals.len() / 2;
        let g = Graph::new();
        let x = g.constant(vals[..2 * n].to_vec(), &[2, n]).unwrap();
        let y = glu(x).unwrap().value();
        for i in 0..n {
            prop_assert!(y[i].abs() <= vals[i].abs());
        }
    }

    #[test]
    fn adam_zero_gradient_identity(vals in proptest::collection::vec(-10.0f64..10.0, 1..16)) {
        let mut p = Tensor::param(vals.clone(), &[vals.len()]).unwrap();
        p.accumulate_grad(&vec![0.0; vals.len()]).unwrap();
        OptimizerState::new(0.001).adam_step(&mut p).unwrap();
        prop_assert_eq!(p.data(), &vals[..]);
    }

    #[test]
    fn masked_softmax_rows_normalized(vals in proptest::collection::vec(-20.0f64..20.0, 12), bits in proptest::collection::vec(any::<bool>(), 12)) {
        let mut mask = bits.clone();
        for r in 0..3 {
            mask[r * 4] = true;
        }
        let g = Graph::new();
        let x = g.constant(vals, &[3, 4]).unwrap();
        let y = x.softmax_rows(Some(&mask)).unwrap().value();
        for r in 0..3 {
            let s: f64 = y[r * 4..r * 4 + 4].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        for i in 0..12 {
            if !mask[i] {
                prop_assert_eq!(y[i], 0.0);
            }
        }
    }
}
