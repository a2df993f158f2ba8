use dmd_core::autodiff::{backprop, clip_grad_norm, l2_norm, mlp_forward, param_count};
use dmd_core::{Activation, AdamW, AdamWConfig, Mlp, Tape, TensorBuf};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight triple-loop forward pass over the documented parameter layout:
/// per layer a row-major `[in, out]` weight block followed by the bias.
fn naive_forward(
    widths: &[usize],
    act: Activation,
    params: &[f64],
    input: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut h: Vec<Vec<f64>> = input.to_vec();
    let mut off = 0;
    for l in 0..widths.len() - 1 {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        h = h
            .iter()
            .map(|row| {
                (0..n_out)
                    .map(|j| {
                        let mut s = b[j];
                        for i in 0..n_in {
                            s += row[i] * w[i * n_out + j];
                        }
                        if l + 2 < widths.len() {
                            act.apply(s)
                        } else {
                            s
                        }
                    })
                    .collect()
            })
            .collect();
    }
    h
}

fn random_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

#[test]
fn zero_weight_net_outputs_its_bias() {
    let widths = vec![2, 3, 1];
    let mut params = vec![0.0; param_count(&widths)];
    *params.last_mut().unwrap() = 0.25;
    let net = Mlp::from_params(widths, Activation::Silu, params).unwrap();
    let y = net
        .forward(&TensorBuf::from_rows(&[[5.0, -7.0], [0.0, 1.0]]).unwrap())
        .unwrap();
    assert_eq!(y.data(), &[0.25, 0.25]);
}

#[test]
fn identity_weights_pass_input_through() {
    let net = Mlp::from_params(
        vec![3, 3],
        Activation::Tanh,
        vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0.],
    )
    .unwrap();
    let x = TensorBuf::from_rows(&[[1.5, -2.0, 0.25]]).unwrap();
    assert_eq!(net.forward(&x).unwrap(), x);
}

#[test]
fn two_layer_forward_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for act in [Activation::Tanh, Activation::Silu] {
        let net = Mlp::init(vec![4, 7, 3], act, &mut rng).unwrap();
        let rows = random_rows(6, 4, &mut rng);
        let got = net.forward(&TensorBuf::from_rows(&rows).unwrap()).unwrap();
        let want = naive_forward(net.widths(), act, net.params(), &rows);
        for (g, w) in got.iter_rows().zip(&want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }
}

/// `sum(seed * net(x))` evaluated with the naive forward pass.
fn probe(
    widths: &[usize],
    act: Activation,
    params: &[f64],
    x: &[Vec<f64>],
    seed: &[Vec<f64>],
) -> f64 {
    naive_forward(widths, act, params, x)
        .iter()
        .zip(seed)
        .map(|(r, s)| r.iter().zip(s).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backprop_matches_central_differences(
        seed in any::<u64>(),
        hidden in 1usize..6,
        depth in 1usize..3,
        rows in 1usize..5,
        silu in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = if silu { Activation::Silu } else { Activation::Tanh };
        let mut widths = vec![3];
        widths.extend(std::iter::repeat_n(hidden, depth));
        widths.push(2);
        let net = Mlp::init(widths.clone(), act, &mut rng).unwrap();
        let x = random_rows(rows, 3, &mut rng);
        let s = random_rows(rows, 2, &mut rng);

        let mut tape = Tape::new();
        mlp_forward(&net, &TensorBuf::from_rows(&x).unwrap(), &mut tape).unwrap();
        let grads = backprop(&mut tape, &TensorBuf::from_rows(&s).unwrap(), net.num_params()).unwrap();

        let h = 1e-6;
        let mut p = net.params().to_vec();
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + h;
            let up = probe(&widths, act, &p, &x, &s);
            p[i] = orig - h;
            let down = probe(&widths, act, &p, &x, &s);
            p[i] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (fd - grads[i]).powi(2);
            scale = scale.max(fd.abs()).max(grads[i].abs());
        }
        prop_assert!(diff.sqrt() <= 1e-6 * scale.max(1.0), "error {}", diff.sqrt());
    }

    #[test]
    fn clipping_bounds_norm_and_keeps_direction(g in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let mut c = g.clone();
        let before = clip_grad_norm(&mut c, 10.0).unwrap();
        prop_assert!((before - l2_norm(&g)).abs() <= 1e-9 * before.max(1.0));
        prop_assert!(l2_norm(&c) <= 10.0 + 1e-9);
        // Clipping only rescales: c = k g with one k > 0 for every entry.
        if before > 0.0 {
            let k = l2_norm(&c) / before;
            for (a, b) in c.iter().zip(&g) {
                prop_assert!((a - k * b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}

#[test]
fn clip_examples() {
    let mut g = vec![30.0, 40.0];
    assert_eq!(clip_grad_norm(&mut g, 10.0).unwrap(), 50.0);
    assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] - 8.0).abs() < 1e-12);
    let mut small = vec![3.0, 4.0];
    clip_grad_norm(&mut small, 10.0).unwrap();
    assert_eq!(small, vec![3.0, 4.0]);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        clip_norm: None,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, 1).unwrap();
    let mut p = vec![0.0];
    opt.step(&mut p, &[2.5]).unwrap();
    // Bias-corrected m/sqrt(v) is g/|g| on the first step, up to eps.
    assert!((p[0] + 0.1).abs() < 1e-8, "{}", p[0]);
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, 3).unwrap();
    let mut p = vec![1.0, -2.0, 0.5];
    for _ in 0..5 {
        opt.step(&mut p, &[0.0; 3]).unwrap();
    }
    assert_eq!(p, vec![1.0, -2.0, 0.5]);
}

#[test]
fn adamw_descends_a_quadratic() {
    let cfg = AdamWConfig {
        lr: 0.05,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, 1).unwrap();
    let mut w = vec![0.0];
    for _ in 0..100 {
        let g = 2.0 * (w[0] - 2.0);
        opt.step(&mut w, &[g]).unwrap();
    }
    assert!((w[0] - 2.0).abs() < 0.5, "w = {}", w[0]);
    assert!((w[0] - 2.0).powi(2) < 4.0);
}

#[test]
fn same_seed_same_parameters_and_outputs() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::init(vec![2, 16, 16, 2], Activation::Silu, &mut rng).unwrap();
        let x = TensorBuf::from_rows(&random_rows(8, 2, &mut rng)).unwrap();
        let y = net.forward(&x).unwrap();
        (net.params().to_vec(), y)
    };
    let (p1, y1) = build();
    let (p2, y2) = build();
    assert_eq!(p1, p2);
    assert_eq!(y1, y2);
}
