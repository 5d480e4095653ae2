//! Rough kernel throughput probe used to size desk-scale configs.

use std::time::Instant;

use lip2us::tensor::graph::Graph;
use lip2us::Tensor;
use rand::SeedableRng;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    // Mimics the heaviest layer: conv over [B,7,96,96] with small filter count.
    let b = 32;
    let (ci, co, h, w, k) = (7usize, 4usize, 96usize, 96usize, 3usize);
    let x = Tensor::<f32>::rand_uniform(&[b, ci, h, w], 0.0, 1.0, &mut rng);
    let kern =
        Tensor::<f32>::rand_uniform(&[co, ci, k, k], -0.1, 0.1, &mut rng).with_requires_grad(true);
    let bias = Tensor::<f32>::zeros(&[co]).with_requires_grad(true);

    let flops_fwd = (b * co * h * w * ci * k * k * 2) as f64;
    // forward only
    let t0 = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.leaf(kern.clone());
        let bv = g.leaf(bias.clone());
        let y = g.conv2d(xv, kv, bv, 1, 1).unwrap();
        std::hint::black_box(g.value(y).data()[0]);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "conv fwd: {:.1} ms, {:.2} GFLOP/s",
        dt * 1e3,
        flops_fwd / dt / 1e9
    );

    // forward + backward through a scalar loss
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.leaf(kern.clone());
        let bv = g.leaf(bias.clone());
        let y = g.conv2d(xv, kv, bv, 1, 1).unwrap();
        let loss = g.mean(y);
        let grads = g.backward(loss).unwrap();
        std::hint::black_box(grads.get(kv).unwrap().data()[0]);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "conv fwd+bwd (no dX): {:.1} ms, {:.2} GFLOP/s-equiv",
        dt * 1e3,
        2.0 * flops_fwd / dt / 1e9
    );

    // matmul probe: decoder-like [32,64] x [4096,64]
    let xm = Tensor::<f32>::rand_uniform(&[32, 64], -1.0, 1.0, &mut rng);
    let wm = Tensor::<f32>::rand_uniform(&[4096, 64], -0.1, 0.1, &mut rng).with_requires_grad(true);
    let bm = Tensor::<f32>::zeros(&[4096]).with_requires_grad(true);
    let mm_flops = (32 * 4096 * 64 * 2) as f64;
    let t0 = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let mut g = Graph::new();
        let xv = g.constant(xm.clone());
        let wv = g.leaf(wm.clone());
        let bv = g.leaf(bm.clone());
        let y = g.dense(xv, wv, bv).unwrap();
        let loss = g.mean(y);
        let grads = g.backward(loss).unwrap();
        std::hint::black_box(grads.get(wv).unwrap().data()[0]);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "dense fwd+bwd: {:.2} ms, {:.2} GFLOP/s-equiv",
        dt * 1e3,
        3.0 * mm_flops / dt / 1e9
    );
}
