use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_gradients, CheckOptions};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
    ts.into_iter()
        .enumerate()
        .map(|(i, t)| (format!("in{i}"), t))
        .collect()
}

/// Weighted sum against a fixed random probe, so every output element matters.
fn probe(g: &Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out);
    let w = g.constant(random(&shape, seed));
    let prod = g.mul(out, w);
    g.sum(prod)
}

fn assert_grads(inputs: Vec<Tensor>, f: impl Fn(&Graph, &[Var]) -> Var) {
    let report = check_gradients(f, &named(inputs), &CheckOptions::default());
    assert!(
        report.max_rel_error < 1e-6,
        "gradient mismatch: {:?}",
        report.worst()
    );
}

#[test]
fn conv2d_matches_direct_loop() {
    let x = random(&[3, 5, 6], 1);
    let w = random(&[4, 3, 3, 3], 2);
    let b = random(&[4], 3);
    let g = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let out = g.value(g.conv2d(vx, vw, Some(vb), ConvSpec::strided(2, 1)));
    assert_eq!(out.shape(), &[4, 3, 3]);
    for co in 0..4 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = b.data()[co];
                for ci in 0..3 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                continue;
                            }
                            acc += w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx]
                                * x.data()[(ci * 5 + iy as usize) * 6 + ix as usize];
                        }
                    }
                }
                let got = out.data()[(co * 3 + oy) * 3 + ox];
                assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
            }
        }
    }
}

#[test]
fn conv2d_gradients() {
    assert_grads(
        vec![random(&[3, 6, 5], 4), random(&[4, 3, 4, 4], 5), random(&[4], 6)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::strided(2, 1));
            probe(g, y, 7)
        },
    );
}

#[test]
fn depthwise_conv_gradients() {
    assert_grads(vec![random(&[4, 5, 5], 8), random(&[4, 1, 3, 3], 9)], |g, v| {
        let y = g.conv2d(v[0], v[1], None, ConvSpec::same(3).with_groups(4));
        probe(g, y, 10)
    });
}

#[test]
fn layer_norm_gradients() {
    assert_grads(
        vec![random(&[5, 3, 2], 11), random(&[5], 12), random(&[5], 13)],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            probe(g, y, 14)
        },
    );
}

#[test]
fn window_attention_gradients() {
    assert_grads(
        vec![
            random(&[4, 4, 4], 15),
            random(&[4, 4, 4], 16),
            random(&[4, 4, 4], 17),
        ],
        |g, v| {
            let y = g.window_attention(v[0], v[1], v[2], 2, 2);
            probe(g, y, 18)
        },
    );
}

#[test]
fn shape_op_gradients() {
    assert_grads(
        vec![random(&[2, 3, 3], 19), random(&[1, 3, 3], 20), random(&[2, 3, 3], 21)],
        |g, v| {
            let m = g.mul_channel_mask(v[0], v[1]);
            let s = g.sub(m, v[2]);
            let c = g.concat(&[s, v[0]]);
            let u = g.upsample2(c);
            let cr = g.crop(u, 5, 4);
            let a = g.activation(cr, Activation::Silu);
            let sp = g.softplus(a);
            let sg = g.sigmoid(sp);
            probe(g, sg, 22)
        },
    );
}

#[test]
fn loss_op_gradients() {
    let x = random(&[2, 3, 3], 23).map(|v| v.abs() + 0.1);
    let target = random(&[2, 3, 3], 24).map(|v| v.abs() + 0.05);
    let t2 = target.clone();
    assert_grads(vec![x], move |g, v| {
        let a = g.log_l2(v[0], &target, 2f64.powi(-16));
        let tm = g.mu_tonemap(v[0], 5000.0, 2.0);
        let b = g.l1_mean(tm, &t2.map(|v| v * 0.5));
        let s = g.add(a, b);
        g.scale(s, 0.7)
    });
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let c = g.constant(Tensor::scalar(2.0));
    let p = g.param(Tensor::scalar(3.0));
    let y = g.mul(c, p);
    let grads = g.backward(y);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().item(), 2.0);
}
