//! Independent oracles for the tensor engine: naive-loop reimplementations
//! of conv/dense/maxpool, finite-difference gradient probes, and the spec'd
//! edge cases. Oracles here never call into the production kernels.

use lip2us::tensor::gradcheck::{check, GradCheck};
use lip2us::tensor::graph::{Activation, Graph, Mode, RunningMoments};
use lip2us::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------- naive oracles ----------

/// Quadruple-loop cross-correlation, gathering one output element at a time.
fn conv2d_oracle(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    k: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, (usize, usize, usize)) {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for oc in 0..co {
        for orow in 0..oh {
            for ocol in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..ci {
                    for r in 0..kh {
                        for s in 0..kw {
                            let ih = orow * stride + r;
                            let iw = ocol * stride + s;
                            if ih < padding || iw < padding {
                                continue;
                            }
                            let (ih, iw) = (ih - padding, iw - padding);
                            if ih >= h || iw >= w {
                                continue;
                            }
                            acc += x[(ic * h + ih) * w + iw] * k[((oc * ci + ic) * kh + r) * kw + s];
                        }
                    }
                }
                out[(oc * oh + orow) * ow + ocol] = acc;
            }
        }
    }
    (out, (co, oh, ow))
}

/// Per-window scan max pool.
fn maxpool_oracle(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    window: usize,
    stride: usize,
) -> (Vec<f64>, (usize, usize, usize)) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
    for ch in 0..c {
        for orow in 0..oh {
            for ocol in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for r in 0..window {
                    for s in 0..window {
                        let v = x[(ch * h + orow * stride + r) * w + ocol * stride + s];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(ch * oh + orow) * ow + ocol] = best;
            }
        }
    }
    (out, (c, oh, ow))
}

/// Explicit-loop dense layer.
fn dense_oracle(x: &[f64], w: &[f64], b: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_out];
    for o in 0..d_out {
        let mut acc = b[o];
        for i in 0..d_in {
            acc += w[o * d_in + i] * x[i];
        }
        out[o] = acc;
    }
    out
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
}

// ---------- conv2d ----------

#[test]
fn conv2d_all_ones_4x4_with_3x3_kernel_gives_nines() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 4, 4]));
    let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv2d_identity_kernel_preserves_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f64>::rand_uniform(&[1, 5, 6], 0.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(xv, k, b, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn conv2d_matches_quadruple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = rand_vec(&mut rng, 2 * 5 * 5, 1.0);
    let k = rand_vec(&mut rng, 3 * 2 * 3 * 3, 1.0);
    let bias = rand_vec(&mut rng, 3, 1.0);
    let (expect, (co, oh, ow)) = conv2d_oracle(&x, (2, 5, 5), &k, (3, 3, 3), &bias, 1, 0);

    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::new(vec![2, 5, 5], x).unwrap());
    let kv = g.constant(Tensor::new(vec![3, 2, 3, 3], k).unwrap());
    let bv = g.constant(Tensor::new(vec![3], bias).unwrap());
    let y = g.conv2d(xv, kv, bv, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[co, oh, ow]);
    for (got, want) in g.value(y).data().iter().zip(&expect) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn conv2d_rejects_kernel_larger_than_padded_input() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 4, 4]));
    let k = g.constant(Tensor::ones(&[1, 1, 7, 7]));
    let b = g.constant(Tensor::zeros(&[1]));
    let err = g.conv2d(x, k, b, 1, 0).unwrap_err();
    assert!(err.to_string().contains("exceeds padded input"), "{err}");
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[3, 4, 4]));
    let k = g.constant(Tensor::ones(&[1, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(g.conv2d(x, k, b, 1, 0).is_err());
}

/// Seeded shape-fuzz: conv2d, dense, maxpool2d against the naive oracles on
/// a spread of shapes, strides and paddings.
#[test]
fn shape_fuzz_against_naive_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut combos = 0;
    // conv2d
    for _ in 0..20 {
        let ci = rng.random_range(1..4usize);
        let co = rng.random_range(1..4usize);
        let kh = rng.random_range(1..4usize);
        let kw = rng.random_range(1..4usize);
        let h = rng.random_range(kh..kh + 7);
        let w = rng.random_range(kw..kw + 7);
        let stride = rng.random_range(1..3usize);
        let padding = rng.random_range(0..2usize);
        let x = rand_vec(&mut rng, ci * h * w, 1.0);
        let k = rand_vec(&mut rng, co * ci * kh * kw, 1.0);
        let bias = rand_vec(&mut rng, co, 1.0);
        let (expect, shape) =
            conv2d_oracle(&x, (ci, h, w), &k, (co, kh, kw), &bias, stride, padding);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(vec![ci, h, w], x).unwrap());
        let kv = g.constant(Tensor::new(vec![co, ci, kh, kw], k).unwrap());
        let bv = g.constant(Tensor::new(vec![co], bias).unwrap());
        let y = g.conv2d(xv, kv, bv, stride, padding).unwrap();
        assert_eq!(g.value(y).shape(), &[shape.0, shape.1, shape.2]);
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-5);
        }
        combos += 1;
    }
    // maxpool2d
    for _ in 0..20 {
        let c = rng.random_range(1..4usize);
        let window = rng.random_range(1..4usize);
        let stride = rng.random_range(1..4usize);
        let h = rng.random_range(window..window + 8);
        let w = rng.random_range(window..window + 8);
        let x = rand_vec(&mut rng, c * h * w, 1.0);
        let (expect, shape) = maxpool_oracle(&x, (c, h, w), window, stride);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(vec![c, h, w], x).unwrap());
        let y = g.maxpool2d(xv, window, stride).unwrap();
        assert_eq!(g.value(y).shape(), &[shape.0, shape.1, shape.2]);
        assert_eq!(g.value(y).data(), &expect[..]);
        combos += 1;
    }
    // dense
    for _ in 0..15 {
        let d_in = rng.random_range(1..24usize);
        let d_out = rng.random_range(1..24usize);
        let x = rand_vec(&mut rng, d_in, 1.0);
        let w = rand_vec(&mut rng, d_out * d_in, 1.0);
        let b = rand_vec(&mut rng, d_out, 1.0);
        let expect = dense_oracle(&x, &w, &b, d_in, d_out);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(vec![d_in], x).unwrap());
        let wv = g.constant(Tensor::new(vec![d_out, d_in], w).unwrap());
        let bv = g.constant(Tensor::new(vec![d_out], b).unwrap());
        let y = g.dense(xv, wv, bv).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-5);
        }
        combos += 1;
    }
    assert!(combos >= 50, "only {combos} fuzz combinations");
}

// ---------- maxpool ----------

#[test]
fn maxpool_single_window_picks_max() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[4.0]);
}

#[test]
fn maxpool_constant_input_gives_constant_output() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 6, 6], 0.7));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));
}

#[test]
fn maxpool_routes_gradient_to_first_argmax_on_ties() {
    let mut g = Graph::<f64>::new();
    let t = Tensor::new(vec![1, 2, 2], vec![5.0, 5.0, 1.0, 5.0])
        .unwrap()
        .with_requires_grad(true);
    let x = g.leaf(t);
    let y = g.maxpool2d(x, 2, 2).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    // Row-major scan finds index 0 first.
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_rejects_window_larger_than_input() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 3, 3]));
    assert!(g.maxpool2d(x, 4, 1).is_err());
}

// ---------- dense ----------

#[test]
fn dense_identity_and_bias_only_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2], vec![3.0, -1.5]).unwrap());
    let ident = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let zero_b = g.constant(Tensor::zeros(&[2]));
    let y = g.dense(x, ident, zero_b).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, -1.5]);

    let zero_w = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let y2 = g.dense(x, zero_w, b).unwrap();
    assert_eq!(g.value(y2).data(), &[1.0, 2.0]);
}

#[test]
fn dense_8_to_4_matches_dot_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let x = rand_vec(&mut rng, 8, 1.0);
    let w = rand_vec(&mut rng, 4 * 8, 1.0);
    let b = rand_vec(&mut rng, 4, 1.0);
    let expect = dense_oracle(&x, &w, &b, 8, 4);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::new(vec![8], x).unwrap());
    let wv = g.constant(Tensor::new(vec![4, 8], w).unwrap());
    let bv = g.constant(Tensor::new(vec![4], b).unwrap());
    let y = g.dense(xv, wv, bv).unwrap();
    for (got, want) in g.value(y).data().iter().zip(&expect) {
        assert!((got - want).abs() < 1e-6);
    }
}

// ---------- activations ----------

#[test]
fn activation_fixed_points() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![3], vec![0.0, -1.0, 2.0]).unwrap());
    let sig = g.activation(x, Activation::Sigmoid);
    assert_eq!(g.value(sig).data()[0], 0.5);
    let leaky = g.activation(x, Activation::LeakyRelu(0.3));
    assert_eq!(g.value(leaky).data(), &[0.0, -0.3, 2.0]);
    let th = g.activation(x, Activation::Tanh);
    assert!((g.value(th).data()[1] - (-1.0f64).tanh()).abs() < 1e-15);
}

// ---------- batchnorm ----------

#[test]
fn batchnorm_constant_batch_collapses_to_beta() {
    // Zero variance: output is beta (gamma scales a zero xhat).
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[4, 2], 3.25));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta0 = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g.batchnorm_train(x, gamma, beta0, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-9));
    assert!((stats.mean[0] - 3.25).abs() < 1e-12);
    assert!(stats.var[0].abs() < 1e-12);

    let beta5 = g.constant(Tensor::full(&[2], 5.0));
    let (y5, _) = g.batchnorm_train(x, gamma, beta5, 1e-5).unwrap();
    assert!(g.value(y5).data().iter().all(|&v| (v - 5.0).abs() < 1e-9));
}

#[test]
fn batchnorm_normalizes_seeded_batch_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::rand_uniform(&[16, 3, 4, 4], -2.0, 5.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::ones(&[3]));
    let beta = g.constant(Tensor::zeros(&[3]));
    let (y, _) = g.batchnorm_train(xv, gamma, beta, 1e-8).unwrap();
    let yd = g.value(y).data();
    let spatial = 16;
    for ch in 0..3 {
        let mut vals = Vec::new();
        for b in 0..16 {
            let base = (b * 3 + ch) * spatial;
            vals.extend_from_slice(&yd[base..base + spatial]);
        }
        let n = vals.len() as f64;
        let mean: f64 = vals.iter().sum::<f64>() / n;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
    }
}

#[test]
fn batchnorm_train_rejects_batch_of_one() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 2]));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let err = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap_err();
    assert!(matches!(err, lip2us::Error::Config(_)));
}

#[test]
fn batchnorm_infer_is_pure_function_of_running_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::rand_uniform(&[1, 2, 3, 3], 0.0, 1.0, &mut rng);
    let running = RunningMoments {
        mean: Tensor::new(vec![2], vec![0.2, 0.4]).unwrap(),
        var: Tensor::new(vec![2], vec![0.5, 2.0]).unwrap(),
    };
    let run = |input: &Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(input.clone());
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g
            .batchnorm_infer(xv, gamma, beta, &running.mean, &running.var, 1e-5)
            .unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(&x), run(&x));
    // And agrees with the closed form.
    let y = run(&x);
    for ch in 0..2 {
        let (m, v) = (running.mean.data()[ch], running.var.data()[ch]);
        for i in 0..9 {
            let idx = ch * 9 + i;
            let expect = (x.data()[idx] - m) / (v + 1e-5).sqrt();
            assert!((y.data()[idx] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn batchnorm_running_update_uses_momentum() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[4, 1], 10.0));
    let gamma = g.constant(Tensor::ones(&[1]));
    let beta = g.constant(Tensor::zeros(&[1]));
    let mut running = RunningMoments::new(1);
    g.batchnorm(x, gamma, beta, &mut running, Mode::Train, 0.1, 1e-5)
        .unwrap();
    // mean: 0.9*0 + 0.1*10 = 1; var: 0.9*1 + 0.1*0 = 0.9
    assert!((running.mean.data()[0] - 1.0).abs() < 1e-12);
    assert!((running.var.data()[0] - 0.9).abs() < 1e-12);
}

// ---------- dropout ----------

#[test]
fn dropout_rate_zero_and_infer_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::rand_uniform(&[50], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y0 = g.dropout(xv, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(y0, xv);
    let y1 = g.dropout(xv, 0.5, Mode::Infer, &mut rng).unwrap();
    assert_eq!(y1, xv);
}

#[test]
fn dropout_rejects_rate_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[4]));
    assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn dropout_statistics_match_rate() {
    // 1e5 ones at rate 0.25: survivors ~0.75 of elements, mean stays ~1.
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[n]));
    let y = g.dropout(x, 0.25, Mode::Train, &mut rng).unwrap();
    let data = g.value(y).data();
    let survivors = data.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    let mean: f64 = data.iter().sum::<f64>() / n as f64;
    assert!((survivors - 0.75).abs() < 0.01, "survival {survivors}");
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    // Survivors carry the inverted-dropout scale.
    let nonzero = data.iter().find(|&&v| v != 0.0).unwrap();
    assert!((nonzero - 1.0 / 0.75).abs() < 1e-12);
}

// ---------- mse + backward basics ----------

#[test]
fn mse_trivial_values() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[2]));
    let same = g.mse_loss(a, a).unwrap();
    assert_eq!(g.value(same).data(), &[0.0]);
    let loss = g.mse_loss(a, b).unwrap();
    assert_eq!(g.value(loss).data(), &[2.5]);
}

#[test]
fn backward_of_sum_gives_all_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones(&[3, 4]).with_requires_grad(true));
    let loss = g.sum(x);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones(&[2]).with_requires_grad(true));
    let p = g.leaf(Tensor::ones(&[5]).with_requires_grad(true));
    let loss = g.sum(x);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones(&[2]).with_requires_grad(true));
    let y = g.scale(x, 2.0);
    assert!(g.backward(y).is_err());
}

// ---------- finite-difference gradient oracles ----------

#[test]
fn fd_check_every_differentiable_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let opts = GradCheck::default();

    // conv2d wrt input, kernels, bias
    let x = Tensor::<f64>::rand_uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
    let k = Tensor::<f64>::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::rand_uniform(&[3], -1.0, 1.0, &mut rng);
    check(&[x, k, b], opts, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
        let t = g.activation(y, Activation::Tanh);
        Ok(g.sum(t))
    })
    .unwrap();

    // maxpool
    let x = Tensor::<f64>::rand_uniform(&[1, 6, 6], -1.0, 1.0, &mut rng);
    check(&[x], opts, |g, v| {
        let y = g.maxpool2d(v[0], 2, 2)?;
        let t = g.activation(y, Activation::Sigmoid);
        Ok(g.sum(t))
    })
    .unwrap();

    // dense (batched) wrt x, w, b
    let x = Tensor::<f64>::rand_uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let w = Tensor::<f64>::rand_uniform(&[4, 5], -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::rand_uniform(&[4], -1.0, 1.0, &mut rng);
    check(&[x, w, b], opts, |g, v| {
        let y = g.dense(v[0], v[1], v[2])?;
        Ok(g.mean(y))
    })
    .unwrap();

    // activations: tanh gradient against central differences (plus the others)
    for kind in [
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::LeakyRelu(0.3),
    ] {
        let x = Tensor::<f64>::rand_uniform(&[10], -2.0, 2.0, &mut rng);
        check(&[x], opts, move |g, v| {
            let y = g.activation(v[0], kind);
            Ok(g.sum(y))
        })
        .unwrap();
    }

    // batchnorm (train stats couple the batch) wrt x, gamma, beta
    let x = Tensor::<f64>::rand_uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng);
    let gamma = Tensor::<f64>::rand_uniform(&[2], 0.5, 1.5, &mut rng);
    let beta = Tensor::<f64>::rand_uniform(&[2], -0.5, 0.5, &mut rng);
    check(&[x, gamma, beta], opts, |g, v| {
        let (y, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
        let t = g.activation(y, Activation::Tanh);
        Ok(g.sum(t))
    })
    .unwrap();

    // batchnorm infer
    let x = Tensor::<f64>::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let gamma = Tensor::<f64>::rand_uniform(&[3], 0.5, 1.5, &mut rng);
    let beta = Tensor::<f64>::rand_uniform(&[3], -0.5, 0.5, &mut rng);
    check(&[x, gamma, beta], opts, |g, v| {
        let rm = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let rv = Tensor::new(vec![3], vec![0.9, 1.1, 0.7]).unwrap();
        let y = g.batchnorm_infer(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
        Ok(g.sum(y))
    })
    .unwrap();

    // dropout with a fixed seed (same mask on every probe)
    let x = Tensor::<f64>::rand_uniform(&[40], -1.0, 1.0, &mut rng);
    check(&[x], opts, |g, v| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(77);
        let y = g.dropout(v[0], 0.25, Mode::Train, &mut drop_rng)?;
        Ok(g.sum(y))
    })
    .unwrap();

    // mse: gradient 2(p-t)/n
    let p = Tensor::<f64>::rand_uniform(&[12], -1.0, 1.0, &mut rng);
    let t = Tensor::<f64>::rand_uniform(&[12], -1.0, 1.0, &mut rng);
    check(&[p.clone(), t.clone()], opts, |g, v| {
        g.mse_loss(v[0], v[1])
    })
    .unwrap();
    // closed-form check of the same gradient
    {
        let mut g = Graph::<f64>::new();
        let pv = g.leaf(p.clone().with_requires_grad(true));
        let tv = g.constant(t.clone());
        let loss = g.mse_loss(pv, tv).unwrap();
        let grads = g.backward(loss).unwrap();
        let gp = grads.get(pv).unwrap();
        for i in 0..12 {
            let expect = 2.0 * (p.data()[i] - t.data()[i]) / 12.0;
            assert!((gp.data()[i] - expect).abs() < 1e-12);
        }
    }

    // elementwise composite: add/sub/mul/scale/concat/scale_rows
    let a = Tensor::<f64>::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let b2 = Tensor::<f64>::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let f = Tensor::<f64>::rand_uniform(&[3, 1], 0.1, 0.9, &mut rng);
    check(&[a, b2, f], opts, |g, v| {
        let s = g.add(v[0], v[1])?;
        let m = g.mul(s, v[0])?;
        let d = g.sub(m, v[1])?;
        let sc = g.scale(d, 0.7);
        let cat = g.concat2(sc, v[1])?;
        let head = g.reshape(cat, vec![3, 8])?;
        let gated = g.scale_rows(head, v[2])?;
        Ok(g.mean(gated))
    })
    .unwrap();
}

// ---------- determinism / purity properties ----------

#[test]
fn forward_determinism_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let x = Tensor::<f32>::rand_uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
        let k = Tensor::<f32>::rand_uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
        let b = Tensor::<f32>::rand_uniform(&[4], -0.5, 0.5, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let kv = g.constant(k);
        let bv = g.constant(b);
        let c = g.conv2d(xv, kv, bv, 1, 1).unwrap();
        let p = g.maxpool2d(c, 2, 2).unwrap();
        let a = g.activation(p, Activation::LeakyRelu(0.3));
        let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
        let d = g.dropout(a, 0.25, Mode::Train, &mut drop_rng).unwrap();
        g.value(d).data().to_vec()
    };
    let first = run();
    let second = run();
    assert!(first.iter().zip(&second).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn finite_inputs_stay_finite_through_op_chain() {
    use proptest::prelude::*;
    let mut runner = proptest::test_runner::TestRunner::default();
    runner
        .run(
            &proptest::collection::vec(-10.0f64..10.0, 36),
            |values| {
                let mut g = Graph::<f64>::new();
                let x = g.constant(Tensor::new(vec![1, 6, 6], values).unwrap());
                let k = g.constant(Tensor::full(&[2, 1, 3, 3], 0.5));
                let b = g.constant(Tensor::zeros(&[2]));
                let c = g.conv2d(x, k, b, 1, 1).unwrap();
                let a = g.activation(c, Activation::Sigmoid);
                let p = g.maxpool2d(a, 2, 2).unwrap();
                let t = g.activation(p, Activation::Tanh);
                let m = g.mean(t);
                prop_assert!(g.value(m).is_finite());
                Ok(())
            },
        )
        .unwrap();
}
