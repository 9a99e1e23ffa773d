//! Central finite-difference checks of every differentiable op in f64.

use gradeprompt_autograd::nn::Attention;
use gradeprompt_autograd::{Graph64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor64::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Scalar probe `sum(out * r)` so every output element contributes.
fn probe(g: &mut Graph64, out: Var) -> Var {
    let r = random(g.shape(out), 999);
    let r = g.input(r);
    let p = g.mul(out, r);
    g.sum_all(p)
}

fn check(inputs: &[Tensor64], f: impl Fn(&mut Graph64, &[Var]) -> Var, tol: f64) {
    let eval = |ins: &[Tensor64]| -> f64 {
        let mut g = Graph64::new(true);
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let l = probe(&mut g, out);
        g.value(l).data()[0]
    };
    let mut g = Graph64::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    for &v in &vars {
        g.watch(v);
    }
    let out = f(&mut g, &vars);
    let l = probe(&mut g, out);
    let grads = g.backward(l);
    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(err < tol, "input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn elementwise_ops() {
    let a = random(&[3, 4], 1);
    let b = random(&[3, 4], 2);
    check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]), 1e-6);
    check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]), 1e-6);
    check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]), 1e-6);
    check(&[a.clone()], |g, v| g.scale(v[0], 2.5), 1e-6);
    check(&[a.clone()], |g, v| g.add_scalar(v[0], 2.5), 1e-6);
    check(&[a.clone()], |g, v| g.gelu(v[0]), 1e-6);
    check(&[a.clone()], |g, v| g.sigmoid(v[0]), 1e-6);
    check(&[a.clone()], |g, v| g.square(v[0]), 1e-6);
    check(&[a], |g, v| g.relu(v[0]), 1e-6);
}

#[test]
fn broadcast_ops() {
    let a = random(&[2, 3, 4], 3);
    let b = random(&[4], 4);
    let c = random(&[1, 3, 4], 5);
    check(&[a.clone(), b.clone()], |g, v| g.add_bcast(v[0], v[1]), 1e-6);
    check(&[a.clone(), c.clone()], |g, v| g.mul_bcast(v[0], v[1]), 1e-6);
    check(&[c], |g, v| g.broadcast_to(v[0], &[2, 3, 4]), 1e-6);
    check(&[a], |g, v| g.sum_all(v[0]), 1e-6);
}

#[test]
fn matmul_all_layouts() {
    for ta in [false, true] {
        for tb in [false, true] {
            let a = random(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, 6);
            let b = random(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, 7);
            check(&[a.clone(), b], move |g, v| g.matmul(v[0], v[1], ta, tb), 1e-6);
            let shared = random(if tb { &[5, 4] } else { &[4, 5] }, 8);
            check(&[a, shared], move |g, v| g.matmul(v[0], v[1], ta, tb), 1e-6);
        }
    }
}

#[test]
fn softmax_and_norms() {
    let x = random(&[2, 3, 5], 9);
    check(&[x.clone()], |g, v| g.softmax(v[0]), 1e-6);
    let gamma = random(&[5], 10);
    let beta = random(&[5], 11);
    check(&[x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), 1e-5);

    let x = random(&[2, 3, 3, 2], 12);
    let gamma = random(&[3], 13);
    let beta = random(&[3], 14);
    check(&[x.clone(), gamma.clone(), beta.clone()], |g, v| g.batch_norm2d(v[0], v[1], v[2], None, 1e-5), 1e-5);
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    check(
        &[x, gamma, beta],
        move |g, v| g.batch_norm2d(v[0], v[1], v[2], Some((&mean, &var)), 1e-5),
        1e-6,
    );
}

#[test]
fn convolution() {
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        let x = random(&[2, 3, 5, 6], 15);
        let w = random(&[4, 3, 3, 3], 16);
        let b = random(&[4], 17);
        check(&[x, w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad), 1e-6);
    }
}

#[test]
fn layout_ops() {
    let x = random(&[2, 3, 4], 18);
    check(&[x.clone()], |g, v| g.reshape(v[0], &[6, 4]), 1e-6);
    check(&[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]), 1e-6);
    check(&[x.clone()], |g, v| g.slice(v[0], 1, 1, 2), 1e-6);
    let y = random(&[2, 1, 4], 19);
    check(&[x.clone(), y], |g, v| g.concat(&[v[0], v[1]], 1), 1e-6);
    check(&[x.clone()], |g, v| g.resize_bilinear(v[0], 7, 5), 1e-6);
    check(&[x], |g, v| g.resize_bilinear(v[0], 2, 2), 1e-6);
}

#[test]
fn cross_entropy_loss() {
    let logits = random(&[4, 3], 20);
    check(&[logits], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]), 1e-6);
}

#[test]
fn attention_layer_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let attn = Attention::<f64>::new("a", 4, 4, 2, &mut rng);
    let q = random(&[2, 3, 4], 22);
    let kv = random(&[2, 5, 4], 23);
    check(&[q, kv], move |g, v| attn.forward(g, v[0], v[1], v[1]), 1e-5);
}
