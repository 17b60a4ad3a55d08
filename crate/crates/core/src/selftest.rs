//! Built-in verification suites: finite-difference gradient checks,
//! sequence-pooling invariants, CLAHE and metric oracles, the cross-entropy
//! anchor and permutation equivariance. Each suite returns one row.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::metrics::{evaluate_labels, hamming_loss};
use crate::model::{
    classify_head, encode, forward, register_constants, seq_pool, CctConfig, CctParams,
    PositionalEmbedding,
};
use crate::preprocess::{clahe, tile_histograms, ClaheParams, ImageU8};
use crate::tensor::{grad_check, grad_check_many, GradCheckReport};
use crate::{Graph, Tensor, Var};

/// Finite-difference step of the gradient checks.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_TIME_LIMIT_S: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckRow {
    pub fn line(&self) -> String {
        format!(
            "{:<4} {:<28} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Result<CheckRow> {
    let start = Instant::now();
    let (passed, detail) = f()?;
    Ok(CheckRow {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .expect("shape matches")
}

/// Dot product with fixed random weights, so every output element reaches
/// the scalar being differentiated.
fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(y), &mut ChaCha8Rng::seed_from_u64(seed), 2.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Kernel = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn kernel_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Kernel, Vec<Tensor<f64>>)> {
    let mut cases: Vec<(&'static str, Kernel, Vec<Tensor<f64>>)> = vec![
        (
            "matmul",
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                contract(g, y, 1)
            }),
            vec![random(&[2, 3, 4], rng, 2.0), random(&[2, 4, 5], rng, 2.0)],
        ),
        (
            "matmul shared rhs",
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                contract(g, y, 2)
            }),
            vec![random(&[2, 3, 4], rng, 2.0), random(&[4, 2], rng, 2.0)],
        ),
    ];
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        cases.push((
            "conv2d",
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                contract(g, y, 3)
            }),
            vec![
                random(&[2, 2, 5, 6], rng, 2.0),
                random(&[3, 2, 3, 3], rng, 2.0),
                random(&[3], rng, 2.0),
            ],
        ));
    }
    let x = random(&[1, 2, 6, 6], rng, 2.0);
    cases.push((
        "maxpool2d",
        Box::new(|g, v| {
            let y = g.maxpool2d(v[0], 3, 2)?;
            contract(g, y, 4)
        }),
        vec![x.clone()],
    ));
    cases.push((
        "relu",
        Box::new(|g, v| {
            let y = g.relu(v[0])?;
            contract(g, y, 5)
        }),
        vec![x],
    ));
    let x = random(&[3, 4, 5], rng, 2.0);
    for axis in 0..3 {
        cases.push((
            "softmax",
            Box::new(move |g, v| {
                let y = g.softmax(v[0], axis)?;
                contract(g, y, 6)
            }),
            vec![x.clone()],
        ));
    }
    cases.push((
        "gelu",
        Box::new(|g, v| {
            let y = g.gelu(v[0])?;
            contract(g, y, 7)
        }),
        vec![x.clone()],
    ));
    cases.push((
        "dropout",
        Box::new(|g, v| {
            let y = g.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(8))?;
            contract(g, y, 8)
        }),
        vec![x.clone()],
    ));
    cases.push((
        "permute/reshape",
        Box::new(|g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            let y = g.reshape(y, [5, 12])?;
            contract(g, y, 9)
        }),
        vec![x.clone()],
    ));
    cases.push((
        "scale/mean/mul",
        Box::new(|g, v| {
            let y = g.scale(v[0], 0.3)?;
            let y = g.mean(y)?;
            g.mul(y, y)
        }),
        vec![x],
    ));
    cases.push((
        "layernorm",
        Box::new(|g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
            contract(g, y, 10)
        }),
        vec![
            random(&[3, 2, 4], rng, 2.0),
            random(&[4], rng, 2.0),
            random(&[4], rng, 2.0),
        ],
    ));
    cases.push((
        "add/add_broadcast/select",
        Box::new(|g, v| {
            let y = g.add_broadcast(v[0], v[1])?;
            let s = g.select(y, 7)?;
            let t = contract(g, y, 11)?;
            g.add(s, t)
        }),
        vec![random(&[2, 3, 4], rng, 2.0), random(&[3, 4], rng, 2.0)],
    ));
    cases.push((
        "cross_entropy",
        Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])),
        vec![random(&[4, 3], rng, 2.0)],
    ));
    cases
}

/// Finite-difference checks of every differentiable kernel and of the tiny
/// model end to end, at 64-bit precision.
pub fn gradients() -> Result<CheckRow> {
    timed("gradient check", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut worst = (0.0f64, "");
        let mut failed = Vec::new();
        let mut checked = 0;
        let mut note = |name: &'static str, r: GradCheckReport| {
            checked += r.checked;
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, name);
            }
            if !r.passed() {
                failed.push(name);
            }
        };
        for (name, f, inputs) in kernel_cases(&mut rng) {
            note(name, grad_check_many(f, &inputs, FD_STEP, GRAD_TOL)?);
        }

        let cfg = CctConfig::tiny();
        let params = CctParams::<Tensor<f64>>::init(&cfg, 21)?
            .map(|t| t.map(|v| v + rng.gen_range(-0.3..0.3)));
        let x = random(
            &[2, cfg.input_channels, cfg.input_size, cfg.input_size],
            &mut rng,
            1.0,
        )
        .map(|v| v.abs());
        let leaves: Vec<Tensor<f64>> = params.leaves().into_iter().cloned().collect();
        let report = grad_check_many(
            |g, vars| {
                let mut it = vars.iter().copied();
                let p = params.map(|_| it.next().expect("one var per leaf"));
                let xv = g.constant(x.clone());
                let out = forward(g, xv, &p, &cfg, None)?;
                g.cross_entropy(out.logits, &[0, 1])
            },
            &leaves,
            FD_STEP,
            GRAD_TOL,
        )?;
        note("tiny CCT", report);

        let secs = start.elapsed().as_secs_f64();
        let passed = failed.is_empty() && secs < GRAD_TIME_LIMIT_S;
        let mut detail = format!(
            "max rel err {:.2e} ({}) over {checked} coordinates, tol {GRAD_TOL:.0e}, {secs:.1}s of {GRAD_TIME_LIMIT_S}s",
            worst.0, worst.1
        );
        if !failed.is_empty() {
            detail.push_str(&format!("; failing: {}", failed.join(", ")));
        }
        Ok((passed, detail))
    })
}

fn pool(z: &Tensor<f64>, score: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let sv = g.constant(score.clone());
    let (pooled, w) = seq_pool(&mut g, zv, sv)?;
    Ok((g.value(pooled).data().to_vec(), g.value(w).data().to_vec()))
}

/// Sequence-pooling weights over random draws are a probability vector and
/// the pooled vector stays inside the per-dimension token range.
pub fn seq_pool_invariants() -> Result<CheckRow> {
    timed("sequence pooling", || {
        let mut worst_sum: f64 = 0.0;
        let mut violations = 0;
        for trial in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let (b, s, d) = (
                rng.gen_range(1..4),
                rng.gen_range(1..17),
                rng.gen_range(1..9),
            );
            let z = random(&[b, s, d], &mut rng, 5.0);
            let score = random(&[d, 1], &mut rng, 3.0);
            let (pooled, w) = pool(&z, &score)?;
            for bi in 0..b {
                let row = &w[bi * s..(bi + 1) * s];
                if row.iter().any(|&v| v < 0.0) {
                    violations += 1;
                }
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                for k in 0..d {
                    let column = (0..s).map(|j| z.data()[(bi * s + j) * d + k]);
                    let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
                        (l.min(v), h.max(v))
                    });
                    let p = pooled[bi * d + k];
                    if p < lo - 1e-12 || p > hi + 1e-12 {
                        violations += 1;
                    }
                }
            }
        }
        let z = Tensor::from_f64([1, 2, 2], &[1.0, 0.0, 0.0, 1.0])?;
        let (_, w) = pool(&z, &Tensor::from_f64([2, 1], &[1.0, 0.0])?)?;
        let hand_err = (w[0] - 0.7311).abs().max((w[1] - 0.2689).abs());
        let passed = violations == 0 && worst_sum < 1e-6 && hand_err < 1e-4;
        Ok((
            passed,
            format!(
                "1000 draws: {violations} violations, max |sum-1| {worst_sum:.1e}; hand case [{:.4}, {:.4}]",
                w[0], w[1]
            ),
        ))
    })
}

/// Direct global equalization: each value maps to the rounded mid-rank
/// position `255 * (count below + count equal / 2) / N`, in integers.
fn global_equalization_oracle(img: &ImageU8) -> Vec<u8> {
    let px = img.data();
    let n = px.len() as u64;
    px.iter()
        .map(|&v| {
            let below = px.iter().filter(|&&u| u < v).count() as u64;
            let equal = px.iter().filter(|&&u| u == v).count() as u64;
            // round(255 (2 below + equal) / 2n), ties away from zero
            let num = 255 * (2 * below + equal);
            ((2 * num + 2 * n) / (4 * n)) as u8
        })
        .collect()
}

fn random_image(rng: &mut ChaCha8Rng) -> ImageU8 {
    let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
    let levels = rng.gen_range(1..=256u32);
    let lo = rng.gen_range(0..=(256 - levels));
    let skew = rng.gen_range(0.3..3.0);
    let data = (0..h * w)
        .map(|_| {
            lo as u8 + (rng.gen::<f64>().powf(skew) * levels as f64).min(levels as f64 - 1.0) as u8
        })
        .collect();
    ImageU8::gray(h, w, data).expect("valid size")
}

/// Single-tile unclipped CLAHE against a brute-force global equalization,
/// constant images, and the clip bound on two-valued images.
pub fn clahe_oracle() -> Result<CheckRow> {
    timed("CLAHE oracle", || {
        let global = ClaheParams {
            tiles_x: 1,
            tiles_y: 1,
            clip_limit: f64::INFINITY,
            bins: 256,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut mismatched = 0;
        for _ in 0..50 {
            let img = random_image(&mut rng);
            if clahe(&img, &global)?.data() != global_equalization_oracle(&img).as_slice() {
                mismatched += 1;
            }
        }

        let mut constant_err = 0i32;
        for v in (0..=255u8).step_by(5) {
            for (h, w) in [(8, 8), (37, 23), (64, 64)] {
                let img = ImageU8::filled(h, w, 1, v)?;
                let out = clahe(&img, &ClaheParams::default())?;
                let e = out
                    .data()
                    .iter()
                    .map(|&o| (o as i32 - v as i32).abs())
                    .max()
                    .unwrap_or(0);
                constant_err = constant_err.max(e);
            }
        }

        let mut worst_ratio: f64 = 0.0;
        let mut mass_err: f64 = 0.0;
        for (h, w, tiles) in [(64, 64, 8), (50, 70, 4), (33, 33, 3), (20, 20, 1)] {
            let mut data = vec![50u8; h * w];
            for i in data.iter_mut().take(h * w / 10) {
                *i = 200;
            }
            data.shuffle(&mut rng);
            let img = ImageU8::gray(h, w, data)?;
            let p = ClaheParams {
                tiles_x: tiles,
                tiles_y: tiles,
                clip_limit: 2.0,
                bins: 256,
            };
            let ys = crate::preprocess::tile_bounds(h, tiles);
            let xs = crate::preprocess::tile_bounds(w, tiles);
            for (i, hist) in tile_histograms(&img, &p)?.iter().enumerate() {
                let (y, x) = (ys[i / tiles], xs[i % tiles]);
                let pixels = ((y.1 - y.0) * (x.1 - x.0)) as f64;
                let uniform = pixels / 256.0;
                let top = hist.iter().cloned().fold(0.0, f64::max);
                worst_ratio = worst_ratio.max(top / uniform);
                mass_err = mass_err.max((hist.iter().sum::<f64>() - pixels).abs());
            }
        }
        let passed =
            mismatched == 0 && constant_err <= 1 && worst_ratio <= 2.0 + 1e-9 && mass_err < 1e-6;
        Ok((
            passed,
            format!(
                "{mismatched}/50 oracle mismatches; constant drift {constant_err}; \
                 max bin {worst_ratio:.4}x uniform at clip 2"
            ),
        ))
    })
}

struct BruteForce {
    precision: Vec<f64>,
    recall: Vec<f64>,
    f1: Vec<f64>,
    support: Vec<f64>,
    macro_avg: [f64; 3],
    weighted: [f64; 3],
    accuracy: f64,
    hamming: f64,
}

/// Metrics recomputed from the raw label pairs, class by class.
fn brute_force(truth: &[usize], pred: &[usize], n: usize) -> BruteForce {
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let mut r = BruteForce {
        precision: vec![],
        recall: vec![],
        f1: vec![],
        support: vec![],
        macro_avg: [0.0; 3],
        weighted: [0.0; 3],
        accuracy: 0.0,
        hamming: 0.0,
    };
    for c in 0..n {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        let p = div(tp, tp + fp);
        let rc = div(tp, tp + fneg);
        r.precision.push(p);
        r.recall.push(rc);
        r.f1.push(div(2.0 * p * rc, p + rc));
        r.support.push(tp + fneg);
    }
    let total = truth.len() as f64;
    for (k, v) in [&r.precision, &r.recall, &r.f1].into_iter().enumerate() {
        r.macro_avg[k] = v.iter().sum::<f64>() / n as f64;
        r.weighted[k] = v.iter().zip(&r.support).map(|(a, s)| a * s).sum::<f64>() / total;
    }
    let same = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64;
    r.accuracy = same / total;
    r.hamming = (total - same) / total;
    r
}

/// Report fields against [`brute_force`] on random label vectors.
pub fn metric_oracle() -> Result<CheckRow> {
    timed("metric oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let n = rng.gen_range(2..=4);
            let len = rng.gen_range(1..80);
            // occasionally starve a class so zero denominators occur
            let top = if rng.gen_bool(0.2) { n - 1 } else { n };
            let truth: Vec<usize> = (0..len).map(|_| rng.gen_range(0..top)).collect();
            let pred: Vec<usize> = truth
                .iter()
                .map(|&t| {
                    if rng.gen_bool(0.6) {
                        t
                    } else {
                        rng.gen_range(0..n)
                    }
                })
                .collect();
            let names: Vec<String> = (0..n).map(|c| format!("c{c}")).collect();
            let rep = evaluate_labels(&truth, &pred, &names)?;
            let want = brute_force(&truth, &pred, n);
            let mut err = |a: f64, b: f64| worst = worst.max((a - b).abs());
            for (c, m) in rep.per_class.iter().enumerate() {
                err(m.precision, want.precision[c]);
                err(m.recall, want.recall[c]);
                err(m.f1, want.f1[c]);
                err(m.support as f64, want.support[c]);
            }
            let got_macro = [
                rep.macro_avg.precision,
                rep.macro_avg.recall,
                rep.macro_avg.f1,
            ];
            let got_weighted = [
                rep.weighted_avg.precision,
                rep.weighted_avg.recall,
                rep.weighted_avg.f1,
            ];
            for k in 0..3 {
                err(got_macro[k], want.macro_avg[k]);
                err(got_weighted[k], want.weighted[k]);
            }
            err(rep.accuracy, want.accuracy);
            err(rep.hamming_loss, want.hamming);
            err(hamming_loss(&truth, &pred)?, want.hamming);
            err(rep.accuracy + rep.hamming_loss, 1.0);
        }
        Ok((
            worst <= 1e-12,
            format!("1000 instances, max deviation {worst:.1e} (tol 1e-12)"),
        ))
    })
}

/// Uniform binary logits give ln 2; the fused gradient equals
/// `(softmax - onehot) / B` and agrees with finite differences.
pub fn cross_entropy_anchor() -> Result<CheckRow> {
    timed("cross-entropy anchor", || {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([4, 2]));
        let l = g.cross_entropy(z, &[0, 1, 1, 0])?;
        let loss_err = (g.value(l).item() - std::f64::consts::LN_2).abs();

        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let logits = random(&[5, 3], &mut rng, 3.0);
        let labels = [2, 0, 1, 1, 0];
        let mut g = Graph::new();
        let v = g.param(logits.clone());
        let l = g.cross_entropy(v, &labels)?;
        g.backward(l)?;
        let grad = g.grad(v).expect("param gradient");
        let mut closed_err: f64 = 0.0;
        for (r, row) in logits.data().chunks(3).enumerate() {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            for c in 0..3 {
                let want = (row[c].exp() / z - f64::from(u8::from(c == labels[r]))) / 5.0;
                closed_err = closed_err.max((grad[r * 3 + c] - want).abs());
            }
        }
        let fd = grad_check(|g, x| g.cross_entropy(x, &labels), &logits, FD_STEP, 1e-6)?;
        let passed = loss_err <= 1e-9 && closed_err < 1e-12 && fd.passed();
        Ok((
            passed,
            format!(
                "|loss - ln2| {loss_err:.1e}; closed-form gradient err {closed_err:.1e}; FD rel err {:.1e} (tol 1e-6)",
                fd.max_rel_error
            ),
        ))
    })
}

/// Without positional embeddings, permuting the tokens fed to the encoder
/// leaves the pooled vector and the logits unchanged.
pub fn permutation_equivariance() -> Result<CheckRow> {
    timed("permutation equivariance", || {
        let cfg = CctConfig {
            positional_embedding: PositionalEmbedding::None,
            encoder_layers: 2,
            ..CctConfig::tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let params = CctParams::<Tensor<f64>>::init(&cfg, 61)?
            .map(|t| t.map(|v| v + rng.gen_range(-0.2..0.2)));
        let d = cfg.embed_dim;
        let run = |tokens: &Tensor<f64>| -> Result<Vec<f64>> {
            let mut g = Graph::new();
            let p = register_constants(&mut g, &params);
            let t = g.constant(tokens.clone());
            let (z, _) = encode(&mut g, t, &p, &cfg, None)?;
            let (pooled, _) = seq_pool(&mut g, z, p.pool_g)?;
            let logits = classify_head(&mut g, pooled, p.head_w, p.head_b)?;
            let mut out = g.value(pooled).data().to_vec();
            out.extend_from_slice(g.value(logits).data());
            Ok(out)
        };
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let s = cfg.seq_len()?;
            let tokens = random(&[1, s, d], &mut rng, 1.5);
            let mut perm: Vec<usize> = (0..s).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<f64> = perm
                .iter()
                .flat_map(|&j| tokens.data()[j * d..(j + 1) * d].to_vec())
                .collect();
            let a = run(&tokens)?;
            let b = run(&Tensor::new(vec![1, s, d], permuted)?)?;
            worst = a
                .iter()
                .zip(&b)
                .fold(worst, |m, (x, y)| m.max((x - y).abs()));
        }
        Ok((
            worst < 1e-6,
            format!("100 trials, max |pooled/logit change| {worst:.1e} (tol 1e-6)"),
        ))
    })
}

/// Every suite, in a fixed order.
pub fn run_all() -> Result<Vec<CheckRow>> {
    Ok(vec![
        gradients()?,
        seq_pool_invariants()?,
        clahe_oracle()?,
        metric_oracle()?,
        cross_entropy_anchor()?,
        permutation_equivariance()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_equalizes_a_known_image() {
        // values 0,0,100,200: mid-ranks 1/4, 1/4, 5/8, 7/8 of 255
        let img = ImageU8::gray(2, 2, vec![0, 0, 100, 200]).unwrap();
        assert_eq!(global_equalization_oracle(&img), vec![64, 64, 159, 223]);
    }

    #[test]
    fn brute_force_matches_hand_confusion() {
        // confusion [[8,2],[1,9]]
        let mut truth = vec![0; 10];
        truth.extend(vec![1; 10]);
        let mut pred = vec![0; 8];
        pred.extend([1, 1, 0]);
        pred.extend(vec![1; 9]);
        let r = brute_force(&truth, &pred, 2);
        assert!((r.precision[0] - 8.0 / 9.0).abs() < 1e-12);
        assert!((r.recall[0] - 0.8).abs() < 1e-12);
        assert!((r.f1[0] - 0.8421).abs() < 1e-4);
    }
}
