//! End-to-end acceptance checks: desk-scale training on the synthetic blob
//! dataset, Grad-CAM localization on the trained model, and run
//! determinism. Each check returns a [`CheckRow`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cct_core::checkpoint::load_checkpoint;
use cct_core::config::{DataConfig, RunConfig};
use cct_core::dataset::{Blob, Split};
use cct_core::gradcam::{grad_cam, pool_attention_map, Heatmap};
use cct_core::model::{forward, register_constants};
use cct_core::run::{prepare_data, run_training, BEST_CHECKPOINT, CURVES, LAST_CHECKPOINT};
use cct_core::selftest::CheckRow;
use cct_core::{DType, Graph, Result, Scalar, Tensor};

pub const DESK_EPOCH_LIMIT: u64 = 150;
pub const DESK_TIME_LIMIT_S: f64 = 15.0 * 60.0;
pub const LOCALIZATION_TARGET: f64 = 0.90;

/// Committed configuration files.
pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

/// Runs `f` on a one-thread pool.
pub fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn row(name: &str, passed: bool, detail: String, start: Instant) -> CheckRow {
    CheckRow {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Trains `cfg` into `out_dir` on one thread. Passes when some epoch within
/// the budget has train accuracy 1 and validation accuracy >= 0.95, inside
/// the time limit.
pub fn desk_scale(cfg: &RunConfig, out_dir: &Path) -> Result<CheckRow> {
    let start = Instant::now();
    let summary = single_threaded(|| run_training(cfg, out_dir, None))?;
    let secs = start.elapsed().as_secs_f64();
    let history = cct_core::train::read_curves(out_dir.join(CURVES))?;
    let hit = history
        .iter()
        .find(|r| r.train_acc >= 1.0 && r.val_acc >= 0.95 && r.epoch <= DESK_EPOCH_LIMIT);
    let passed = hit.is_some() && secs < DESK_TIME_LIMIT_S;
    let detail = match hit {
        Some(r) => format!(
            "train acc {:.4}, val acc {:.4} at epoch {} of {DESK_EPOCH_LIMIT}; {secs:.0}s of {DESK_TIME_LIMIT_S:.0}s single-threaded",
            r.train_acc, r.val_acc, r.epoch
        ),
        None => {
            let (train, val) = summary.last.map_or((0.0, 0.0), |r| (r.train_acc, r.val_acc));
            format!(
                "targets not reached in {} epochs (last train acc {train:.4}, val acc {val:.4}); {secs:.0}s",
                summary.epochs
            )
        }
    };
    Ok(row("desk-scale learning", passed, detail, start))
}

/// Localization counts over correctly classified diseased validation images.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Localization {
    pub images: usize,
    pub grad_cam_hits: usize,
    pub grad_cam_degenerate: usize,
    pub pool_hits: usize,
}

fn inside_beats_outside(hm: &Heatmap, blob: &Blob) -> bool {
    let (y0, y1, x0, x1) = Blob::quadrant_bounds(blob.quadrant, hm.height);
    let (inside, outside) = hm.inside_outside_means(y0, y1, x0, x1);
    inside > outside
}

/// Grad-CAM (and, for reference, the sequence-pooling map) of the
/// checkpointed model on the synthetic validation split.
pub fn localization<T: Scalar>(ckpt: &Path) -> Result<Localization> {
    let (state, cfg) = load_checkpoint::<T>(ckpt)?;
    let data = prepare_data::<T>(&cfg)?;
    let Some((ds, assign)) = &data.synthetic else {
        return Err(cct_core::Error::Config(
            "localization needs synthetic data".into(),
        ));
    };
    let all = cct_core::dataset::Samples::<T>::from_images(
        &ds.images,
        &ds.labels,
        &cfg.preprocess,
        cfg.model.input_size,
    )?;
    let mut out = Localization::default();
    for i in 0..ds.labels.len() {
        if assign[i] != Split::Val || ds.labels[i] != 1 {
            continue;
        }
        let blob = ds.blobs[i].expect("diseased samples carry a blob");
        let x = Tensor::stack(&[&all.inputs[i]])?;
        let hm = grad_cam(&x, &state.params, &cfg.model, None)?;
        if hm.predicted_class != 1 {
            continue;
        }
        out.images += 1;
        out.grad_cam_degenerate += usize::from(hm.is_degenerate());
        out.grad_cam_hits += usize::from(inside_beats_outside(&hm, &blob));

        let mut g = Graph::new();
        let p = register_constants(&mut g, &state.params);
        let xv = g.constant(x);
        let fwd = forward(&mut g, xv, &p, &cfg.model, None)?;
        let w: Vec<f64> = g
            .value(fwd.pool_weights)
            .data()
            .iter()
            .map(|v| v.f64())
            .collect();
        out.pool_hits += usize::from(inside_beats_outside(
            &pool_attention_map(&w, &cfg.model, 1)?,
            &blob,
        ));
    }
    Ok(out)
}

pub fn gradcam_localization(ckpt: &Path) -> Result<CheckRow> {
    let start = Instant::now();
    let loc = match cct_core::checkpoint::read_header(ckpt)?.dtype {
        DType::F32 => localization::<f32>(ckpt)?,
        DType::F64 => localization::<f64>(ckpt)?,
    };
    let frac = loc.grad_cam_hits as f64 / loc.images.max(1) as f64;
    let detail = format!(
        "inside > outside on {}/{} correctly classified diseased val images ({:.1}%, need {:.0}%); \
         {} maps degenerate; pooling-weight map {}/{}",
        loc.grad_cam_hits,
        loc.images,
        100.0 * frac,
        100.0 * LOCALIZATION_TARGET,
        loc.grad_cam_degenerate,
        loc.pool_hits,
        loc.images
    );
    Ok(row(
        "Grad-CAM localization",
        loc.images > 0 && frac >= LOCALIZATION_TARGET,
        detail,
        start,
    ))
}

fn bitwise_params_equal(a: &Path, b: &Path) -> Result<bool> {
    let (sa, _) = load_checkpoint::<f64>(a)?;
    let (sb, _) = load_checkpoint::<f64>(b)?;
    Ok(sa
        .params
        .leaves()
        .iter()
        .zip(sb.params.leaves())
        .all(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .all(|(p, q)| p.to_bits() == q.to_bits())
        }))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| cct_core::Error::io(path, e))
}

/// Two straight runs of `cfg` at 64-bit precision, plus a run stopped after
/// `split_at` epochs and resumed from its last checkpoint. All three must
/// produce identical `curves.csv` and final parameters.
pub fn determinism(cfg: &RunConfig, split_at: u64, work: &Path) -> Result<CheckRow> {
    let start = Instant::now();
    assert_eq!(
        cfg.model.precision,
        DType::F64,
        "determinism is checked at 64-bit precision"
    );
    let (a, b, c) = (work.join("a"), work.join("b"), work.join("c"));
    run_training(cfg, &a, None)?;
    run_training(cfg, &b, None)?;
    let mut short = cfg.clone();
    short.optimizer.epochs = split_at;
    run_training(&short, &c, None)?;
    run_training(cfg, &c, Some(&c.join(LAST_CHECKPOINT)))?;

    let curves = read(&a.join(CURVES))?;
    let same_runs = curves == read(&b.join(CURVES))?
        && bitwise_params_equal(&a.join(LAST_CHECKPOINT), &b.join(LAST_CHECKPOINT))?;
    let resumed = curves == read(&c.join(CURVES))?
        && bitwise_params_equal(&a.join(LAST_CHECKPOINT), &c.join(LAST_CHECKPOINT))?;
    let best_same = bitwise_params_equal(&a.join(BEST_CHECKPOINT), &c.join(BEST_CHECKPOINT))?;
    let epochs = curves.lines().count() - 1;
    let detail = format!(
        "repeat run identical: {same_runs}; resume after epoch {split_at} identical: {resumed} \
         (best checkpoint {best_same}); {epochs} epochs compared"
    );
    Ok(row(
        "determinism",
        same_runs && resumed && best_same,
        detail,
        start,
    ))
}

/// The synthetic configuration, shrunk for the determinism runs.
pub fn determinism_config(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.precision = DType::F64;
    cfg.optimizer.epochs = 3;
    cfg.optimizer.stop_at = None;
    cfg.data = DataConfig::Synthetic {
        n_per_class: 16,
        image_size: 64,
        fractions: (0.75, 0.25, 0.0),
    };
    cfg
}
