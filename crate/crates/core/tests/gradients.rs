//! Finite-difference checks of every differentiable kernel and of the full
//! tiny model, at 64-bit precision with h = 1e-5.

use cct_core::model::{forward, register_params, CctConfig, CctParams};
use cct_core::tensor::{grad_check, grad_check_many, GradCheckReport};
use cct_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

/// Contracts a tensor-valued node with fixed random weights so every output
/// element influences the scalar.
fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn assert_passes(name: &str, r: GradCheckReport) {
    assert!(r.passed(), "{name}: {r:?}");
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let w = random(&[4, 2], &mut rng);
    let r = grad_check_many(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            contract(g, y, 9)
        },
        &[a.clone(), b],
        H,
        TOL,
    )
    .unwrap();
    assert_passes("batched matmul", r);
    let r = grad_check_many(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            contract(g, y, 10)
        },
        &[a, w],
        H,
        TOL,
    )
    .unwrap();
    assert_passes("shared-rhs matmul", r);
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = random(&[2, 2, 5, 6], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let r = grad_check_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                contract(g, y, 11)
            },
            &[x, k, b],
            H,
            TOL,
        )
        .unwrap();
        assert_passes("conv2d", r);
    }
}

#[test]
fn maxpool_relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 2, 6, 6], &mut rng);
    let r = grad_check(
        |g, x| {
            let y = g.maxpool2d(x, 3, 2)?;
            contract(g, y, 12)
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("maxpool", r);
    let r = grad_check(
        |g, x| {
            let y = g.relu(x)?;
            contract(g, y, 13)
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("relu", r);

    // relu at x = [-1, 2]: derivative [0, 1]
    let x = Tensor::<f64>::from_f64([2], &[-1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let y = g.relu(v).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[0.0, 1.0]);
    let r = grad_check(
        |g, x| {
            let y = g.relu(x)?;
            g.sum(y)
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9);
}

#[test]
fn constant_input_maxpool_tie_goes_to_first() {
    // On a plateau the subgradient routed to the first position is the
    // one-sided derivative seen when that position is nudged upwards.
    let x = Tensor::<f64>::full([1, 1, 2, 2], 0.5);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let y = g.maxpool2d(v, 2, 2).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    let f = |d: &[f64]| d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut up = x.data().to_vec();
    up[0] += H;
    assert!(((f(&up) - 0.5) / H - 1.0).abs() < 1e-6);
}

#[test]
fn smooth_kernel_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 4, 5], &mut rng);
    for axis in 0..3 {
        let r = grad_check(
            |g, x| {
                let y = g.softmax(x, axis)?;
                contract(g, y, 14)
            },
            &x,
            H,
            TOL,
        )
        .unwrap();
        assert_passes("softmax", r);
    }
    let r = grad_check(
        |g, x| {
            let y = g.gelu(x)?;
            contract(g, y, 15)
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("gelu", r);
    let r = grad_check(
        |g, x| {
            let y = g.permute(x, &[2, 0, 1])?;
            let y = g.reshape(y, [5, 12])?;
            contract(g, y, 16)
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("permute/reshape", r);
    let r = grad_check(
        |g, x| {
            let y = g.scale(x, 0.3)?;
            let y = g.mean(y)?;
            let z = g.mul(y, y)?;
            Ok(z)
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert_passes("scale/mean/mul", r);
}

#[test]
fn layernorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[4], &mut rng);
    let gain = random(&[4], &mut rng);
    let bias = random(&[4], &mut rng);
    let r = grad_check_many(
        |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
            contract(g, y, 17)
        },
        &[x, gain.clone(), bias.clone()],
        H,
        TOL,
    )
    .unwrap();
    assert_passes("layernorm 4-vector", r);
    let x = random(&[3, 2, 4], &mut rng);
    let r = grad_check_many(
        |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
            contract(g, y, 18)
        },
        &[x, gain, bias],
        H,
        TOL,
    )
    .unwrap();
    assert_passes("layernorm batch", r);
}

#[test]
fn broadcast_and_select_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let r = grad_check_many(
        |g, v| {
            let y = g.add_broadcast(v[0], v[1])?;
            let y = g.relu(y)?;
            let s = g.select(y, 7)?;
            let t = contract(g, y, 19)?;
            g.add(s, t)
        },
        &[a, b],
        H,
        TOL,
    )
    .unwrap();
    assert_passes("add_broadcast/select", r);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(&[4, 3], &mut rng);
    let labels = [0usize, 2, 1, 2];
    let mut g = Graph::new();
    let v = g.param(logits.clone());
    let l = g.cross_entropy(v, &labels).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(v).unwrap().to_vec();
    // closed form (softmax - onehot) / B
    for (r, row) in logits.data().chunks(3).enumerate() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..3 {
            let want = (row[c].exp() / z - f64::from(c == labels[r])) / 4.0;
            assert!((grad[r * 3 + c] - want).abs() < 1e-15);
        }
    }
    let r = grad_check(|g, x| g.cross_entropy(x, &labels), &logits, H, 1e-6).unwrap();
    assert_passes("cross entropy", r);
}

#[test]
fn full_tiny_model_gradients() {
    let cfg = CctConfig::tiny();
    let params = CctParams::<Tensor<f64>>::init(&cfg, 21).unwrap();
    // larger weights than the 0.02 init so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let params = params.map(|t| t.map(|v| v + rng.gen_range(-0.3..0.3)));
    let x = random(&[2, 2, 8, 8], &mut ChaCha8Rng::seed_from_u64(23)).map(|v| v.abs() / 2.0);
    let leaves: Vec<Tensor<f64>> = params.leaves().into_iter().cloned().collect();
    let r = grad_check_many(
        |g, vars| {
            let mut it = vars.iter().copied();
            let p = params.map(|_| it.next().unwrap());
            let xv = g.constant(x.clone());
            let out = forward(g, xv, &p, &cfg, None)?;
            g.cross_entropy(out.logits, &[0, 1])
        },
        &leaves,
        H,
        TOL,
    )
    .unwrap();
    assert!(r.checked > params.num_scalars() / 2, "{r:?}");
    assert_passes("tiny CCT", r);

    // the same gradients through the ordinary registration path
    let mut g = Graph::new();
    let p = register_params(&mut g, &params);
    let xv = g.constant(x.clone());
    let out = forward(&mut g, xv, &p, &cfg, None).unwrap();
    let l = g.cross_entropy(out.logits, &[0, 1]).unwrap();
    g.backward(l).unwrap();
    assert!(p.leaves().iter().all(|&&v| g.grad(v).is_some()));
}
