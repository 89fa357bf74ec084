use paranet_core::attention::{
    alignment_diagnostics, attention_distillation_loss, attention_entropy, attention_mask, distillation_loss_var,
    mask_center, mask_matrix, positional_encoding, AlignmentMatrix, AttentionBlock, MaskConfig,
    PositionalEncodingConfig,
};
use paranet_core::nn::{grad_check_many, grad_check_params, Graph, Tensor, Var};
use paranet_core::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn one_hot(n: usize, m: usize, at: impl Fn(usize) -> usize) -> AlignmentMatrix<f64> {
    let mut w = vec![0.0; n * m];
    for j in 0..n {
        w[j * m + at(j)] = 1.0;
    }
    AlignmentMatrix::new(w, n, m, 0).unwrap()
}

fn uniform(n: usize, m: usize) -> AlignmentMatrix<f64> {
    AlignmentMatrix::new(vec![1.0 / m as f64; n * m], n, m, 0).unwrap()
}

fn random_rows(n: usize, m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..n * m).map(|_| rng.random_range(0.01..1.0)).collect();
    for row in w.chunks_mut(m) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    w
}

#[test]
#[allow(clippy::approx_constant)]
fn distillation_oracles() {
    let t = one_hot(5, 4, |j| j % 4);
    let loss = attention_distillation_loss(&[t.clone(), t.clone()], &t).unwrap();
    assert!(loss.abs() < 1e-9);

    let u = uniform(5, 4);
    let loss = attention_distillation_loss(std::slice::from_ref(&u), &u).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-9);

    let loss = attention_distillation_loss(&[t.clone(), u.clone()], &t).unwrap();
    assert!((loss - 0.693147).abs() < 1e-6);

    let bad = uniform(5, 3);
    assert!(matches!(attention_distillation_loss(&[bad], &t), Err(Error::Shape(_))));
}

#[test]
fn distillation_var_matches_value_form() {
    let (n, m) = (6, 5);
    let teacher = random_rows(n, m, 1);
    let students = [random_rows(n, m, 2), random_rows(n, m, 3)];
    let g = Graph::<f64>::new();
    let vars: Vec<_> = students.iter().map(|s| g.constant(s.clone(), &[n, m]).unwrap()).collect();
    let a = distillation_loss_var(&vars, &teacher).unwrap().item();
    let mats: Vec<_> = students.iter().map(|s| AlignmentMatrix::new(s.clone(), n, m, 0).unwrap()).collect();
    let b = attention_distillation_loss(&mats, &AlignmentMatrix::new(teacher, n, m, 0).unwrap()).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn exhaustive_mask_rows() {
    let cfg = MaskConfig::default();
    for m in [1usize, 8, 41, 100] {
        let n = 201;
        let allowed = mask_matrix(n, m, &cfg);
        let scores = random(&[n, m], m as u64);
        let g = Graph::new();
        let w = g.constant(scores.into_data(), &[n, m]).unwrap().softmax_rows(Some(&allowed)).unwrap().value();
        for i in 0..n {
            let c = ((i as f64 * 4.0 / 6.3).round_ties_even() as usize).min(m - 1);
            let lo = c.saturating_sub(3);
            let hi = (c + 3).min(m - 1);
            assert_eq!(attention_mask(i, m, &cfg), lo..hi + 1);
            let row = &w[i * m..(i + 1) * m];
            for (t, &v) in row.iter().enumerate() {
                if t < lo || t > hi {
                    assert_eq!(v, 0.0);
                }
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn single_key_and_identical_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let block = AttentionBlock::<f64>::new(6, 5, 5, 6, 8, &mut rng);
    let g = Graph::new();
    let q = g.constant(random(&[6, 4], 1).into_data(), &[6, 4]).unwrap();
    let k = g.constant(random(&[5, 1], 2).into_data(), &[5, 1]).unwrap();
    let out = block.forward(&g, q, k, k, None, None, None).unwrap();
    assert!(out.weights.value().iter().all(|&v| v == 1.0));

    let col = random(&[5, 1], 3).into_data();
    let same: Vec<f64> = (0..5).flat_map(|c| std::iter::repeat_n(col[c], 3)).collect();
    let k = g.constant(same, &[5, 3]).unwrap();
    let out = block.forward(&g, q, k, k, None, None, None).unwrap();
    assert!(out.weights.value().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-9));
}

#[test]
fn hand_two_key_softmax() {
    // identity projections make scores plain dot products / sqrt(2)
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut block = AttentionBlock::<f64>::new(2, 2, 2, 2, 2, &mut rng);
    for lin in [&mut block.query_proj, &mut block.key_proj, &mut block.value_proj, &mut block.out_proj] {
        lin.weight.assign(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    }
    let g = Graph::new();
    let q = g.constant(vec![2.0, 0.0], &[2, 1]).unwrap();
    let k = g.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let w = block.forward(&g, q, k, k, None, None, None).unwrap().weights.value();
    let gap = 2.0 / 2f64.sqrt();
    let want = 1.0 / (1.0 + (-gap).exp());
    assert!((w[0] - want).abs() < 1e-12);
}

#[test]
fn masked_row_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = AttentionBlock::<f64>::new(2, 2, 2, 2, 4, &mut rng);
    let g = Graph::new();
    let q = g.constant(vec![1.0; 4], &[2, 2]).unwrap();
    let k = g.constant(vec![1.0; 6], &[2, 3]).unwrap();
    let mask = [true, false, false, false, false, false];
    let err = block.forward(&g, q, k, k, None, None, Some(&mask)).unwrap_err();
    assert!(matches!(err, Error::MaskedRow { row: 1 }));
}

fn attn_loss_vars<'g>(
    g: &'g Graph<f64>,
    block: &AttentionBlock<f64>,
    qv: Var<'g, f64>,
    kv: Var<'g, f64>,
    pe_q: &[f64],
    target: &[f64],
    mask: Option<&[bool]>,
) -> Result<Var<'g, f64>> {
    let pq = g.constant(pe_q.to_vec(), &qv.shape())?;
    let out = block.forward(g, qv, kv, kv, Some(pq), None, mask)?;
    let t = g.constant(target.to_vec(), &qv.shape())?;
    out.context.mul(t)?.sum().add(out.weights.square().sum())
}

fn attn_loss<'g>(
    g: &'g Graph<f64>,
    block: &AttentionBlock<f64>,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    pe_q: &[f64],
    target: &[f64],
    mask: Option<&[bool]>,
) -> Result<Var<'g, f64>> {
    let qv = g.constant(q.data().to_vec(), q.shape())?;
    let kv = g.constant(k.data().to_vec(), k.shape())?;
    attn_loss_vars(g, block, qv, kv, pe_q, target, mask)
}

#[test]
fn attention_gradients() {
    for (seed, (dq, dk, n, m, masked)) in [(3, 4, 5, 4, false), (4, 2, 3, 6, true), (2, 3, 7, 3, false)].into_iter().enumerate() {
        let seed = seed as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block = AttentionBlock::<f64>::new(dq, dk, dk, dq, 6, &mut rng);
        let q = random(&[dq, n], 10 + seed);
        let k = random(&[dk, m], 20 + seed);
        let target = random(&[dq, n], 30 + seed);
        let pe_q = positional_encoding::<f64>(n, &PositionalEncodingConfig::new(dq + dq % 2, 1.0)).unwrap();
        let pe_q: Vec<f64> = pe_q.data()[..dq * n].to_vec();
        let mask = masked.then(|| mask_matrix(n, m, &MaskConfig { rate_ratio: 0.5, window_back: 1, window_forward: 1, enabled: true }));
        let tgt = target.data().to_vec();
        let err = grad_check_many(
            |g, v| attn_loss_vars(g, &block, v[0], v[1], &pe_q, &tgt, mask.as_deref()),
            &[q.clone(), k.clone()],
        )
        .unwrap();
        assert!(err < 1e-4, "input gradient {err}");
        let err = grad_check_params(
            &mut block,
            |g, b| attn_loss(g, b, &q, &k, &pe_q, &tgt, mask.as_deref()),
            1,
        )
        .unwrap();
        assert!(err < 1e-4, "parameter gradient {err}");

        let teacher = random_rows(n, m, 40 + seed);
        let students = [random(&[n, m], 50 + seed), random(&[n, m], 60 + seed)];
        let err = grad_check_many(
            |_, v| {
                let s: Vec<_> = v.iter().map(|x| x.softmax_rows(None)).collect::<Result<_>>()?;
                distillation_loss_var(&s, &teacher)
            },
            &students,
        )
        .unwrap();
        assert!(err < 1e-4, "distillation gradient {err}");
    }
}

#[test]
fn diagnostics_examples() {
    let d = alignment_diagnostics(&one_hot(8, 8, |j| j), None);
    assert_eq!((d.skip_count, d.repeat_count, d.focus_rate, d.diagonal_rate), (0, 0, 1.0, 1.0));
    let d = alignment_diagnostics(&uniform(4, 5), None);
    assert!((d.focus_rate - 0.2).abs() < 1e-15);

    // tokens 4..9 are never visited; token 5 is exempt
    let w = one_hot(6, 10, |j| j % 3);
    let mut exempt = vec![false; 10];
    exempt[5] = true;
    assert_eq!(alignment_diagnostics(&w, None).skip_count, 6);
    assert_eq!(alignment_diagnostics(&w, Some(&exempt)).skip_count, 5);
}

#[test]
fn entropy_examples() {
    assert_eq!(attention_entropy(&one_hot(3, 4, |_| 1)), 0.0);
    assert!((attention_entropy(&uniform(3, 8)) - 8f64.ln()).abs() < 1e-12);
    let w = AlignmentMatrix::new(vec![0.5, 0.5, 0.0, 0.2, 0.3, 0.5], 2, 3, 0).unwrap();
    let want = (-(2.0 * 0.5 * 0.5f64.ln()) - (0.2 * 0.2f64.ln() + 0.3 * 0.3f64.ln() + 0.5 * 0.5f64.ln())) / 2.0;
    assert!((attention_entropy(&w) - want).abs() < 1e-12);
}

#[test]
fn export_writes_csv_and_pgm() {
    let dir = std::env::temp_dir().join(format!("paranet-align-{}", std::process::id()));
    let a = AlignmentMatrix::new(vec![1.0, 0.0, 0.25, 0.75], 2, 2, 3).unwrap();
    a.export(&dir, "utt1").unwrap();
    let csv = std::fs::read_to_string(dir.join("utt1_block3.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read(dir.join("utt1_block3.pgm")).unwrap().starts_with(b"P5\n2 2\n255\n"));
    std::fs::remove_dir_all(&dir).ok();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_entropy_bounds_entropy(seed in 0u64..10_000, n in 1usize..8, m in 1usize..8) {
        let t = AlignmentMatrix::new(random_rows(n, m, seed), n, m, 0).unwrap();
        let s = AlignmentMatrix::new(random_rows(n, m, seed + 1), n, m, 0).unwrap();
        let ce = attention_distillation_loss(&[s], &t).unwrap();
        let h = attention_entropy(&t);
        prop_assert!(ce >= h - 1e-9);
        let self_ce = attention_distillation_loss(std::slice::from_ref(&t), &t).unwrap();
        prop_assert!((self_ce - h).abs() < 1e-9);
    }

    #[test]
    fn pe_entries_bounded(len in 1usize..64, half in 1usize..16, omega in 0.01f64..10.0) {
        let pe = positional_encoding::<f64>(len, &PositionalEncodingConfig::new(2 * half, omega)).unwrap();
        prop_assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn mask_centers_monotone(m in 1usize..120, i in 0usize..400) {
        let cfg = MaskConfig::default();
        prop_assert!(mask_center(i, m, &cfg) <= mask_center(i + 1, m, &cfg));
        prop_assert!(!attention_mask(i, m, &cfg).is_empty());
    }
}
