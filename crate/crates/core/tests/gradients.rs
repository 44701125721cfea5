//! Reverse-mode gradients against central differences in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit::autodiff::{finite_diff_check, Graph, Var};
use segkit::unet::{forward_graph, BoundParams, ModelConfig, UNet};
use segkit::{ShapeError, Tensor};

const H: f64 = 1e-6;
const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

/// Values bounded away from zero so relu's kink is never straddled.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar probe `<y, u>` for a fixed random `u` of y's shape.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, ShapeError> {
    let mut r = rng(seed);
    let shape = g.value(y).shape().to_vec();
    let u = g.constant(Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0)));
    let prod = g.mul(y, u)?;
    Ok(g.sum(prod))
}

fn check(
    name: &str,
    x0: &Tensor<f64>,
    tol: f64,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var, ShapeError>,
) {
    let report = finite_diff_check(f, x0, H).unwrap();
    assert!(
        report.max_rel_error < tol,
        "{name}: rel err {:.3e} at {} (analytic {}, numeric {})",
        report.max_rel_error,
        report.worst_index,
        report.analytic[report.worst_index],
        report.numeric[report.worst_index]
    );
}

#[test]
fn conv3d_all_inputs() {
    let mut r = rng(1);
    let x = random(&mut r, &[2, 2, 4, 5, 3], -1.0, 1.0);
    let w = random(&mut r, &[3, 2, 3, 3, 2], -1.0, 1.0);
    let b = random(&mut r, &[3], -1.0, 1.0);
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        let (w1, b1) = (w.clone(), b.clone());
        check("conv3d/x", &x, OP_TOL, move |g, xv| {
            let (wv, bv) = (g.constant(w1.clone()), g.constant(b1.clone()));
            let y = g.conv3d(xv, wv, Some(bv), stride, pad)?;
            probe(g, y, 3)
        });
        let (x1, b1) = (x.clone(), b.clone());
        check("conv3d/w", &w, OP_TOL, move |g, wv| {
            let (xv, bv) = (g.constant(x1.clone()), g.constant(b1.clone()));
            let y = g.conv3d(xv, wv, Some(bv), stride, pad)?;
            probe(g, y, 3)
        });
        let (x1, w1) = (x.clone(), w.clone());
        check("conv3d/b", &b, OP_TOL, move |g, bv| {
            let (xv, wv) = (g.constant(x1.clone()), g.constant(w1.clone()));
            let y = g.conv3d(xv, wv, Some(bv), stride, pad)?;
            probe(g, y, 3)
        });
    }
}

#[test]
fn maxpool3d() {
    // distinct values keep every window's maximum strict
    let mut r = rng(2);
    let mut vals: Vec<f64> = (0..2 * 2 * 4 * 4 * 6).map(|i| i as f64 * 0.01).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(&mut r);
    let x = Tensor::new(vec![2, 2, 4, 4, 6], vals).unwrap();
    check("maxpool3d", &x, OP_TOL, |g, xv| {
        let y = g.maxpool3d(xv, 2, 2)?;
        probe(g, y, 4)
    });
}

#[test]
fn resize_trilinear_up_and_down() {
    let mut r = rng(3);
    let x = random(&mut r, &[1, 2, 3, 4, 5], -1.0, 1.0);
    for dst in [[6, 8, 10], [2, 3, 2], [1, 5, 4]] {
        check("resize_trilinear", &x, OP_TOL, move |g, xv| {
            let y = g.resize_trilinear(xv, dst)?;
            probe(g, y, 5)
        });
    }
}

#[test]
fn elementwise_ops() {
    let mut r = rng(4);
    let x = away_from_zero(&mut r, &[2, 3, 2, 2, 2]);
    let other = random(&mut r, &[2, 3, 2, 2, 2], -1.0, 1.0);
    check("relu", &x, OP_TOL, |g, xv| {
        let y = g.relu(xv);
        probe(g, y, 6)
    });
    check("sigmoid", &x, OP_TOL, |g, xv| {
        let y = g.sigmoid(xv);
        probe(g, y, 6)
    });
    let o = other.clone();
    check("add", &x, OP_TOL, move |g, xv| {
        let c = g.constant(o.clone());
        let y = g.add(c, xv)?;
        probe(g, y, 6)
    });
    let o = other.clone();
    check("mul", &x, OP_TOL, move |g, xv| {
        let c = g.constant(o.clone());
        let y = g.mul(c, xv)?;
        probe(g, y, 6)
    });
    check("mul/self", &x, OP_TOL, |g, xv| {
        let y = g.mul(xv, xv)?;
        probe(g, y, 6)
    });
    check("sum", &x, OP_TOL, |g, xv| Ok(g.sum(xv)));
}

#[test]
fn mul_broadcast_both_inputs() {
    let mut r = rng(5);
    let x = random(&mut r, &[2, 3, 2, 3, 2], -1.0, 1.0);
    let alpha = random(&mut r, &[2, 1, 2, 3, 2], 0.0, 1.0);
    let a = alpha.clone();
    check("mul_broadcast/x", &x, OP_TOL, move |g, xv| {
        let av = g.constant(a.clone());
        let y = g.mul_broadcast(xv, av)?;
        probe(g, y, 7)
    });
    let xc = x.clone();
    check("mul_broadcast/alpha", &alpha, OP_TOL, move |g, av| {
        let xv = g.constant(xc.clone());
        let y = g.mul_broadcast(xv, av)?;
        probe(g, y, 7)
    });
}

#[test]
fn concat_channels_both_inputs() {
    let mut r = rng(6);
    let a = random(&mut r, &[2, 2, 2, 3, 2], -1.0, 1.0);
    let b = random(&mut r, &[2, 3, 2, 3, 2], -1.0, 1.0);
    let bc = b.clone();
    check("concat/a", &a, OP_TOL, move |g, av| {
        let bv = g.constant(bc.clone());
        let y = g.concat_channels(av, bv)?;
        probe(g, y, 8)
    });
    let ac = a.clone();
    check("concat/b", &b, OP_TOL, move |g, bv| {
        let av = g.constant(ac.clone());
        let y = g.concat_channels(av, bv)?;
        probe(g, y, 8)
    });
}

#[test]
fn softmax_channels() {
    let mut r = rng(7);
    let x = random(&mut r, &[2, 4, 2, 2, 3], -2.0, 2.0);
    check("softmax", &x, OP_TOL, |g, xv| {
        let y = g.softmax_channels(xv)?;
        probe(g, y, 9)
    });
}

fn one_hot_target(r: &mut ChaCha8Rng, n: usize, c: usize, s: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![n, c, s]);
    for b in 0..n {
        for v in 0..s {
            let k = r.gen_range(0..c);
            t.data_mut()[(b * c + k) * s + v] = 1.0;
        }
    }
    t
}

#[test]
fn dice_loss_wrt_probabilities() {
    let mut r = rng(8);
    let t = one_hot_target(&mut r, 2, 4, 12);
    let p = random(&mut r, &[2, 4, 12], 0.05, 1.0);
    for fg_only in [true, false] {
        let tc = t.clone();
        check("dice_loss", &p, OP_TOL, move |g, pv| {
            let tv = g.constant(tc.clone());
            g.dice_loss(pv, tv, fg_only)
        });
    }
    let tc = t.clone();
    check(
        "softmax+dice",
        &random(&mut r, &[2, 4, 12], -2.0, 2.0),
        OP_TOL,
        move |g, xv| {
            let p = g.softmax_channels(xv)?;
            let tv = g.constant(tc.clone());
            g.dice_loss(p, tv, true)
        },
    );
}

fn toy_model() -> UNet {
    UNet::new(ModelConfig {
        depth: 2,
        base_channels: 2,
        ..ModelConfig::toy(21)
    })
    .unwrap()
}

fn model_loss(
    model: &UNet,
    g: &mut Graph<f64>,
    params: &BoundParams,
    x: Var,
    target: &Tensor<f64>,
) -> Result<Var, ShapeError> {
    let p = forward_graph(model.config(), g, params, x).map_err(|e| ShapeError::Invalid {
        op: "unet_forward",
        reason: e.to_string(),
    })?;
    let t = g.constant(target.clone());
    g.dice_loss(p, t, true)
}

#[test]
fn whole_model_wrt_every_parameter_and_input() {
    let model = toy_model();
    let mut r = rng(9);
    let input = random(&mut r, &[1, 4, 8, 8, 8], 0.0, 1.0);
    let target = one_hot_target(&mut r, 1, 4, 512)
        .reshape(vec![1, 4, 8, 8, 8])
        .unwrap();
    let names = model.names().to_vec();

    for (k, name) in names.iter().enumerate() {
        let x0: Tensor<f64> = model.params()[k].cast();
        let report = finite_diff_check(
            |g, pv| {
                let vars: Vec<Var> = model
                    .params()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| if i == k { pv } else { g.constant(p.cast()) })
                    .collect();
                let bound = BoundParams::new(names.clone(), vars);
                let x = g.constant(input.clone());
                model_loss(&model, g, &bound, x, &target)
            },
            &x0,
            H,
        )
        .unwrap();
        assert!(
            report.max_rel_error < MODEL_TOL,
            "{name}: rel err {:.3e}",
            report.max_rel_error
        );
    }

    let report = finite_diff_check(
        |g, xv| {
            let bound = model.bind::<f64>(g, false);
            model_loss(&model, g, &bound, xv, &target)
        },
        &input,
        H,
    )
    .unwrap();
    assert!(
        report.max_rel_error < MODEL_TOL,
        "input: rel err {:.3e}",
        report.max_rel_error
    );
}

#[test]
fn corrupted_backward_is_caught() {
    let mut r = rng(10);
    let x = random(&mut r, &[3, 4], -1.0, 1.0);
    let report = finite_diff_check(
        |g, xv| {
            let value = g.value(xv).map(f64::sin);
            let y = g.custom(
                &[xv],
                value,
                Box::new(|inputs, _out, up| {
                    // deliberately 10% too large
                    vec![inputs[0]
                        .data()
                        .iter()
                        .zip(up)
                        .map(|(&x, &u)| 1.1 * x.cos() * u)
                        .collect()]
                }),
            );
            Ok(g.sum(y))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(
        report.max_rel_error > 0.05,
        "corruption went unnoticed: {:.3e}",
        report.max_rel_error
    );
}
