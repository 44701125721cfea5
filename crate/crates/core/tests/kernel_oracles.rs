//! Conv, max-pool and trilinear resize against direct nested-loop definitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit::autodiff::Graph;
use segkit::Tensor;
use segkit_oracles as oracles;

const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn shape5(t: &Tensor<f64>) -> [usize; 5] {
    t.shape().try_into().unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Weighted sum `<y, u>` with a fixed pseudo-random `u`, so backward sees a non-trivial upstream.
fn weighted_sum(g: &mut Graph<f64>, y: segkit::autodiff::Var, seed: u64) -> segkit::autodiff::Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let u = g.constant(Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)));
    let prod = g.mul(y, u).unwrap();
    g.sum(prod)
}

fn upstream_values(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn conv3d_matches_direct_loops_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let oc = rng.gen_range(1..=3);
        let k = [
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        ];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let dims = [0, 1, 2].map(|a| rng.gen_range(k[a].max(2)..=7));
        let x = random(&mut rng, &[n, c, dims[0], dims[1], dims[2]]);
        let w = random(&mut rng, &[oc, c, k[0], k[1], k[2]]);
        let b: Vec<f64> = (0..oc).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::<f64>::new();
        let xv = g.variable(x.clone());
        let wv = g.variable(w.clone());
        let bv = g.variable(Tensor::new(vec![oc], b.clone()).unwrap());
        let y = g.conv3d(xv, wv, Some(bv), stride, pad).unwrap();
        let loss = weighted_sum(&mut g, y, case);
        g.backward(loss).unwrap();

        let up = upstream_values(g.value(y).len(), case);
        let naive = oracles::conv3d(
            x.data(),
            shape5(&x),
            w.data(),
            shape5(&w),
            &b,
            stride,
            pad,
            &up,
        );
        assert_eq!(g.value(y).shape(), &naive.shape, "case {case}");
        assert!(
            max_diff(g.value(y).data(), &naive.out) < TOL,
            "forward case {case}"
        );
        assert!(
            max_diff(g.grad(xv).unwrap().data(), &naive.gx) < TOL,
            "grad x case {case}"
        );
        assert!(
            max_diff(g.grad(wv).unwrap().data(), &naive.gw) < TOL,
            "grad w case {case}"
        );
        assert!(
            max_diff(g.grad(bv).unwrap().data(), &naive.gb) < TOL,
            "grad b case {case}"
        );
    }
}

#[test]
fn conv3d_f32_matches_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 4, 8, 8, 8]);
    let w = random(&mut rng, &[6, 4, 3, 3, 3]);
    let mut g64 = Graph::<f64>::new();
    let (a, b) = (g64.constant(x.clone()), g64.constant(w.clone()));
    let y64 = g64.conv3d(a, b, None, 1, 1).unwrap();
    let mut g32 = Graph::<f32>::new();
    let (a, b) = (g32.constant(x.cast()), g32.constant(w.cast()));
    let y32 = g32.conv3d(a, b, None, 1, 1).unwrap();
    let back: Tensor<f64> = g32.value(y32).cast();
    assert!(max_diff(back.data(), g64.value(y64).data()) < 1e-4);
}

#[test]
fn maxpool_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let window = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=3);
        let shape = [
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            rng.gen_range(window..=7),
            rng.gen_range(window..=7),
            rng.gen_range(window..=7),
        ];
        // quantized values force ties
        let x = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0..4) as f64);
        let mut g = Graph::<f64>::new();
        let xv = g.variable(x.clone());
        let y = g.maxpool3d(xv, window, stride).unwrap();
        let loss = weighted_sum(&mut g, y, case);
        g.backward(loss).unwrap();
        let up = upstream_values(g.value(y).len(), case);

        let (os, out, gx) = oracles::maxpool3d(x.data(), shape, window, stride, &up);
        assert_eq!(g.value(y).shape(), &os, "case {case}");
        assert!(
            max_diff(g.value(y).data(), &out) < TOL,
            "forward case {case}"
        );
        assert!(
            max_diff(g.grad(xv).unwrap().data(), &gx) < TOL,
            "grad case {case}"
        );
    }
}

#[test]
fn trilinear_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..20 {
        let src = [
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
        ];
        let dst = [
            rng.gen_range(1..=9),
            rng.gen_range(1..=9),
            rng.gen_range(1..=9),
        ];
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let x = random(&mut rng, &[n, c, src[0], src[1], src[2]]);
        let mut g = Graph::<f64>::new();
        let xv = g.variable(x.clone());
        let y = g.resize_trilinear(xv, dst).unwrap();
        let loss = weighted_sum(&mut g, y, case);
        g.backward(loss).unwrap();
        let up = upstream_values(g.value(y).len(), case);

        let (out, gx) = oracles::trilinear(x.data(), n * c, src, dst, &up);
        assert!(
            max_diff(g.value(y).data(), &out) < TOL,
            "forward case {case}"
        );
        assert!(
            max_diff(g.grad(xv).unwrap().data(), &gx) < TOL,
            "grad case {case}"
        );
    }
}
