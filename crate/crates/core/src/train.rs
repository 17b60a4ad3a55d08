//! Optimization loop: Adam updates, epochs over shuffled batches, split
//! evaluation and learning-curve export.
//!
//! All randomness is derived from the run seed together with the epoch,
//! step or sample index, so a run resumed from a checkpoint continues
//! exactly as an uninterrupted one would.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_augment, AugmentPolicy};
use crate::config::{AdamConfig, OptimizerConfig};
use crate::dataset::{batches, Samples};
use crate::error::{Error, Result};
use crate::model::{
    argmax_rows, forward, register_constants, register_params, CctConfig, CctParams,
};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Stream offset separating dropout randomness from other uses of the seed.
const DROPOUT_SALT: u64 = 0xD5A7_11E5_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: CctParams<Tensor<T>>,
    /// Adam first moments, one per parameter.
    pub m: CctParams<Tensor<T>>,
    /// Adam second moments.
    pub v: CctParams<Tensor<T>>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_val_loss: Option<f64>,
    pub epochs_since_best: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &CctConfig, seed: u64) -> Result<Self> {
        let params = CctParams::<Tensor<T>>::init(cfg, seed)?;
        Ok(Self::from_params(params, seed))
    }

    pub fn from_params(params: CctParams<Tensor<T>>, seed: u64) -> Self {
        let zeros = params.map(|t| Tensor::zeros(t.shape().to_vec()));
        TrainState {
            m: zeros.clone(),
            v: zeros,
            params,
            step: 0,
            epoch: 0,
            seed,
            history: Vec::new(),
            best_val_loss: None,
            epochs_since_best: 0,
        }
    }

    /// Records an epoch and updates the best-validation bookkeeping.
    /// Returns whether the validation loss improved.
    fn push_record(&mut self, rec: EpochRecord) -> bool {
        self.history.push(rec);
        self.epoch = rec.epoch;
        let improved = self.best_val_loss.is_none_or(|b| rec.val_loss < b);
        if improved {
            self.best_val_loss = Some(rec.val_loss);
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        improved
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Scalar>(
    state: &mut TrainState<T>,
    grads: &CctParams<Tensor<T>>,
    opt: &AdamConfig,
) -> Result<()> {
    let shapes_match = state.params.leaves().len() == grads.leaves().len()
        && state
            .params
            .leaves()
            .iter()
            .zip(grads.leaves())
            .all(|(p, g)| p.shape() == g.shape());
    if !shapes_match {
        let named = state.params.named();
        let gnamed = grads.named();
        let (name, lhs, rhs) = named
            .iter()
            .zip(&gnamed)
            .find(|((_, p), (_, g))| p.shape() != g.shape())
            .map(|((n, p), (_, g))| (n.clone(), p.shape().to_vec(), g.shape().to_vec()))
            .unwrap_or_else(|| {
                (
                    "parameter count".into(),
                    vec![named.len()],
                    vec![gnamed.len()],
                )
            });
        log::error!("gradient shape mismatch at {name}");
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs,
            rhs,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(opt.beta1), T::of(opt.beta2));
    let c1 = T::one() - T::of(opt.beta1.powi(t));
    let c2 = T::one() - T::of(opt.beta2.powi(t));
    let (lr, eps) = (T::of(opt.lr), T::of(opt.eps));
    let params = state.params.leaves_mut();
    let ms = state.m.leaves_mut();
    let vs = state.v.leaves_mut();
    for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads.leaves()) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss and gradients of one batch. `dropout_rng` enables training mode.
pub fn loss_and_grads<T: Scalar>(
    params: &CctParams<Tensor<T>>,
    x: Tensor<T>,
    labels: &[usize],
    cfg: &CctConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<usize>, CctParams<Tensor<T>>)> {
    let mut g = Graph::new();
    let p = register_params(&mut g, params);
    let xv = g.constant(x);
    let out = forward(&mut g, xv, &p, cfg, dropout_rng)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    g.backward(loss)?;
    let preds = argmax_rows(g.value(out.logits).data(), cfg.num_classes);
    let grads = p.map(|&v| {
        let shape = g.shape(v).to_vec();
        match g.grad(v) {
            Some(d) => Tensor::new(shape, d.to_vec()).expect("gradient matches its parameter"),
            None => Tensor::zeros(shape),
        }
    });
    Ok((g.value(loss).item().f64(), preds, grads))
}

/// Augmentation stream of a sample in an epoch.
pub fn augment_stream(epoch: u64, sample: usize) -> u64 {
    (epoch << 32) | sample as u64
}

fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_SALT);
    rng.set_stream(step);
    rng
}

/// Mean loss, accuracy and predictions with augmentation and dropout off.
pub fn evaluate_split<T: Scalar>(
    params: &CctParams<Tensor<T>>,
    split: &Samples<T>,
    cfg: &CctConfig,
    batch_size: usize,
) -> Result<(f64, f64, Vec<usize>)> {
    if split.is_empty() {
        return Err(Error::Empty("cannot evaluate an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let parts = idx
        .par_chunks(batch_size)
        .map(|chunk| {
            let (x, labels) = split.batch(chunk)?;
            let mut g = Graph::new();
            let p = register_constants(&mut g, params);
            let xv = g.constant(x);
            let out = forward(&mut g, xv, &p, cfg, None)?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            let preds = argmax_rows(g.value(out.logits).data(), cfg.num_classes);
            Ok((g.value(loss).item().f64() * chunk.len() as f64, preds))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(split.len());
    for (l, p) in parts {
        total += l;
        preds.extend(p);
    }
    let correct = preds
        .iter()
        .zip(&split.labels)
        .filter(|(p, t)| p == t)
        .count();
    Ok((
        total / split.len() as f64,
        correct as f64 / split.len() as f64,
        preds,
    ))
}

/// Loss and accuracy of the training pass, averaged over samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochTrainStats {
    pub loss: f64,
    pub acc: f64,
}

/// One pass over the training split: shuffled batches, per-sample
/// augmentation, forward, cross-entropy, backward and an Adam step per
/// batch.
pub fn train_pass<T: Scalar>(
    state: &mut TrainState<T>,
    train: &Samples<T>,
    policy: &AugmentPolicy,
    cfg: &CctConfig,
    opt: &OptimizerConfig,
) -> Result<EpochTrainStats> {
    if train.is_empty() {
        return Err(Error::Empty("training split has no samples".into()));
    }
    let epoch = state.epoch;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for chunk in batches(train.len(), opt.batch_size, state.seed, epoch)? {
        let inputs = chunk
            .par_iter()
            .map(|&i| sample_augment(&train.inputs[i], policy, augment_stream(epoch, i)))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&inputs.iter().collect::<Vec<_>>())?;
        let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
        let mut rng = dropout_rng(state.seed, state.step);
        let rng = (cfg.dropout > 0.0).then_some(&mut rng);
        let (loss, preds, grads) = loss_and_grads(&state.params, x, &labels, cfg, rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss became {loss} at step {}",
                state.step
            )));
        }
        adam_step(state, &grads, &opt.adam)?;
        loss_sum += loss * chunk.len() as f64;
        correct += preds.iter().zip(&labels).filter(|(p, t)| p == t).count();
    }
    let n = train.len() as f64;
    Ok(EpochTrainStats {
        loss: loss_sum / n,
        acc: correct as f64 / n,
    })
}

/// A training pass followed by validation; the record is appended to the
/// history. Without a validation split the training figures stand in for
/// the validation columns. Returns the record and whether validation loss
/// improved.
pub fn train_epoch<T: Scalar>(
    state: &mut TrainState<T>,
    train: &Samples<T>,
    val: Option<&Samples<T>>,
    policy: &AugmentPolicy,
    cfg: &CctConfig,
    opt: &OptimizerConfig,
) -> Result<(EpochRecord, bool)> {
    let stats = train_pass(state, train, policy, cfg, opt)?;
    let (val_loss, val_acc) = match val {
        Some(v) if !v.is_empty() => {
            let (l, a, _) = evaluate_split(&state.params, v, cfg, opt.batch_size)?;
            (l, a)
        }
        _ => (stats.loss, stats.acc),
    };
    let rec = EpochRecord {
        epoch: state.epoch + 1,
        train_loss: stats.loss,
        train_acc: stats.acc,
        val_loss,
        val_acc,
    };
    let improved = state.push_record(rec);
    Ok((rec, improved))
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochBudget,
    TargetsReached,
    EarlyStop,
}

/// Whether the run should stop after its latest epoch.
pub fn stop_reason<T>(state: &TrainState<T>, opt: &OptimizerConfig) -> Option<StopReason> {
    let last = state.history.last()?;
    if let Some(t) = opt.stop_at {
        if last.train_acc >= t.train_acc && last.val_acc >= t.val_acc {
            return Some(StopReason::TargetsReached);
        }
    }
    if opt
        .early_stop_patience
        .is_some_and(|p| state.epochs_since_best >= p)
    {
        return Some(StopReason::EarlyStop);
    }
    (state.epoch >= opt.epochs).then_some(StopReason::EpochBudget)
}

pub fn curves_csv(history: &[EpochRecord]) -> Result<String> {
    if history.is_empty() {
        return Err(Error::Empty("no completed epochs to export".into()));
    }
    let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    }
    Ok(s)
}

pub fn export_curves<T>(state: &TrainState<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, curves_csv(&state.history)?).map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`export_curves`].
pub fn read_curves(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad =
        |line: usize| Error::InvalidArgument(format!("{}: malformed line {line}", path.display()));
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 1));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(i + 1))?,
                train_loss: num(f[1])?,
                train_acc: num(f[2])?,
                val_loss: num(f[3])?,
                val_acc: num(f[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PositionalEmbedding;

    fn toy_samples(n: usize, seed: u64) -> Samples<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let inputs = labels
            .iter()
            .map(|&l| {
                let data = (0..2 * 64)
                    .map(|_| rng.gen_range(0.0..0.5) + l as f64 * 0.3)
                    .collect();
                Tensor::new([2, 8, 8], data).unwrap()
            })
            .collect();
        Samples {
            inputs,
            labels,
            ids: (0..n).map(|i| i.to_string()).collect(),
        }
    }

    fn scalar_state(p: f64) -> TrainState<f64> {
        let cfg = CctConfig::tiny();
        let params = CctParams::<Tensor<f64>>::init(&cfg, 0)
            .unwrap()
            .map(|t| t.map(|_| p));
        TrainState::from_params(params, 0)
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut s = scalar_state(0.5);
        let grads = s.params.map(|t| t.map(|_| 1.0));
        let opt = AdamConfig::default();
        adam_step(&mut s, &grads, &opt).unwrap();
        assert_eq!(s.step, 1);
        let want = 0.5 - opt.lr / (1.0 + opt.eps);
        assert!(s
            .params
            .leaves()
            .iter()
            .all(|t| t.data().iter().all(|&v| (v - want).abs() < 1e-15)));
    }

    #[test]
    fn adam_zero_gradient_and_determinism() {
        let mut a = scalar_state(0.25);
        let before = a.params.clone();
        let zeros = a.params.map(|t| t.map(|_| 0.0));
        adam_step(&mut a, &zeros, &AdamConfig::default()).unwrap();
        assert_eq!(a.step, 1);
        for (x, y) in a.params.leaves().iter().zip(before.leaves()) {
            assert_eq!(x.data(), y.data());
        }
        let mut b = a.clone();
        let grads = a.params.map(|t| t.map(|v| v.sin()));
        adam_step(&mut a, &grads, &AdamConfig::default()).unwrap();
        adam_step(&mut b, &grads, &AdamConfig::default()).unwrap();
        for (x, y) in a.params.leaves().iter().zip(b.params.leaves()) {
            assert_eq!(x.data(), y.data());
        }
        let mut wrong = grads.clone();
        wrong.head_b = Tensor::zeros([3]);
        assert!(matches!(
            adam_step(&mut a, &wrong, &AdamConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros([3, 2]));
        let loss = g.cross_entropy(l, &[0, 1, 1]).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = g.constant(Tensor::from_f64([1, 2], &[2.0, 0.0]).unwrap());
        let loss = g.cross_entropy(l, &[0]).unwrap();
        let e2 = 2f64.exp();
        assert!((g.value(loss).item() + (e2 / (e2 + 1.0)).ln()).abs() < 1e-12);
        assert!((g.value(loss).item() - 0.1269).abs() < 1e-4);
        let l = g.constant(Tensor::from_f64([1, 2], &[60.0, 0.0]).unwrap());
        let loss = g.cross_entropy(l, &[0]).unwrap();
        assert!(g.value(loss).item() < 1e-20);
        assert!(matches!(
            g.cross_entropy(l, &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_lr_is_a_fixed_point() {
        let cfg = CctConfig::tiny();
        let mut state = TrainState::<f64>::new(&cfg, 1).unwrap();
        let before = state.params.clone();
        let opt = OptimizerConfig {
            adam: AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            batch_size: 3,
            ..Default::default()
        };
        let data = toy_samples(7, 2);
        train_epoch(
            &mut state,
            &data,
            Some(&data),
            &AugmentPolicy::default(),
            &cfg,
            &opt,
        )
        .unwrap();
        assert_eq!(state.history.len(), 1);
        assert_eq!(state.epoch, 1);
        assert_eq!(state.step, 3);
        for (x, y) in state.params.leaves().iter().zip(before.leaves()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn single_sample_descent() {
        let cfg = CctConfig {
            positional_embedding: PositionalEmbedding::None,
            ..CctConfig::tiny()
        };
        let data = toy_samples(1, 3);
        let mut state = TrainState::<f64>::new(&cfg, 4).unwrap();
        let opt = OptimizerConfig {
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            batch_size: 1,
            ..Default::default()
        };
        let mut losses = Vec::new();
        for _ in 0..51 {
            let (rec, _) = train_epoch(
                &mut state,
                &data,
                None,
                &AugmentPolicy::identity(),
                &cfg,
                &opt,
            )
            .unwrap();
            losses.push(rec.train_loss);
        }
        let non_increasing = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(non_increasing >= 45, "{non_increasing} of 50: {losses:?}");
    }

    #[test]
    fn same_seed_same_history() {
        let cfg = CctConfig {
            dropout: 0.2,
            ..CctConfig::tiny()
        };
        let data = toy_samples(10, 5);
        let opt = OptimizerConfig {
            batch_size: 4,
            ..Default::default()
        };
        let run = || {
            let mut s = TrainState::<f64>::new(&cfg, 6).unwrap();
            for _ in 0..3 {
                train_epoch(
                    &mut s,
                    &data,
                    Some(&data),
                    &AugmentPolicy::default(),
                    &cfg,
                    &opt,
                )
                .unwrap();
            }
            s
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(
            curves_csv(&a.history).unwrap(),
            curves_csv(&b.history).unwrap()
        );
    }

    #[test]
    fn evaluate_split_contracts() {
        let cfg = CctConfig::tiny();
        let state = TrainState::<f64>::new(&cfg, 7).unwrap();
        let data = toy_samples(6, 8);
        let (loss, acc, preds) = evaluate_split(&state.params, &data, &cfg, 4).unwrap();
        let (loss1, _, preds1) = evaluate_split(&state.params, &data, &cfg, 1).unwrap();
        assert_eq!(preds, preds1);
        assert!((loss - loss1).abs() < 1e-12);
        let ham = crate::metrics::hamming_loss(&data.labels, &preds).unwrap();
        assert!((acc - (1.0 - ham)).abs() < 1e-15);

        let doubled = data.subset(&[0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5]);
        let (_, _, p2) = evaluate_split(&state.params, &doubled, &cfg, 5).unwrap();
        assert_eq!(&p2[..6], &preds[..]);
        assert_eq!(&p2[6..], &preds[..]);

        // relabel each sample with its own prediction
        let mut agree = data.clone();
        agree.labels = preds.clone();
        assert_eq!(
            evaluate_split(&state.params, &agree, &cfg, 4).unwrap().1,
            1.0
        );
        assert!(evaluate_split(&state.params, &data.subset(&[]), &cfg, 4).is_err());
    }

    #[test]
    fn curves_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        let mut state = scalar_state(0.0);
        assert!(export_curves(&state, &path).is_err());
        for e in 1..=3 {
            state.push_record(EpochRecord {
                epoch: e,
                train_loss: 1.0 / 3.0 * e as f64,
                train_acc: 0.1 + e as f64 / 7.0,
                val_loss: std::f64::consts::PI / e as f64,
                val_acc: 0.123456789012345,
            });
        }
        export_curves(&state, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 4);
        let back = read_curves(&path).unwrap();
        for (a, b) in back.iter().zip(&state.history) {
            assert_eq!(a.epoch, b.epoch);
            assert!((a.train_loss - b.train_loss).abs() < 1e-9);
            assert!((a.val_loss - b.val_loss).abs() < 1e-9);
            assert!((a.train_acc - b.train_acc).abs() < 1e-9);
            assert!((a.val_acc - b.val_acc).abs() < 1e-9);
        }
    }

    #[test]
    fn stop_rules() {
        let mut state = scalar_state(0.0);
        let opt = OptimizerConfig {
            epochs: 3,
            early_stop_patience: Some(2),
            stop_at: Some(crate::config::StopTargets {
                train_acc: 1.0,
                val_acc: 0.95,
            }),
            ..Default::default()
        };
        let rec = |epoch, val_loss, acc| EpochRecord {
            epoch,
            train_loss: 0.0,
            train_acc: acc,
            val_loss,
            val_acc: acc,
        };
        assert_eq!(stop_reason(&state, &opt), None);
        state.push_record(rec(1, 1.0, 0.5));
        assert_eq!(stop_reason(&state, &opt), None);
        state.push_record(rec(2, 1.5, 0.5));
        state.push_record(rec(3, 1.5, 0.5));
        assert_eq!(stop_reason(&state, &opt), Some(StopReason::EarlyStop));
        state.push_record(rec(4, 0.1, 1.0));
        assert_eq!(stop_reason(&state, &opt), Some(StopReason::TargetsReached));
    }
}
