//! End-to-end training run: data preparation, the epoch loop with
//! checkpoints, and the final evaluation artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{DataConfig, RunConfig};
use crate::dataset::{
    scan_folder, split, stratified_split, synth_generate, DatasetManifest, Samples, Split,
    SyntheticDataset,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_labels, EvalReport};
use crate::model::CctParams;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::train::{
    evaluate_split, export_curves, stop_reason, train_epoch, EpochRecord, StopReason, TrainState,
};

pub const BEST_CHECKPOINT: &str = "ckpt_best.cct";
pub const LAST_CHECKPOINT: &str = "ckpt_last.cct";
pub const CURVES: &str = "curves.csv";

/// Preprocessed splits of a run.
#[derive(Debug, Clone)]
pub struct PreparedData<T> {
    pub train: Samples<T>,
    pub val: Samples<T>,
    pub test: Samples<T>,
    pub class_names: Vec<String>,
    /// The generated dataset and each sample's split, for synthetic runs.
    pub synthetic: Option<(SyntheticDataset, Vec<Split>)>,
    pub manifest: Option<DatasetManifest>,
}

fn indices(assign: &[Split], which: Split) -> Vec<usize> {
    (0..assign.len()).filter(|&i| assign[i] == which).collect()
}

pub fn prepare_data<T: Scalar>(cfg: &RunConfig) -> Result<PreparedData<T>> {
    let size = cfg.model.input_size;
    match &cfg.data {
        DataConfig::Synthetic {
            n_per_class,
            image_size,
            fractions,
        } => {
            let ds = synth_generate(*n_per_class, *image_size, cfg.seed)?;
            let assign = stratified_split(&ds.labels, *fractions, cfg.seed)?;
            let all = Samples::from_images(&ds.images, &ds.labels, &cfg.preprocess, size)?;
            Ok(PreparedData {
                train: all.subset(&indices(&assign, Split::Train)),
                val: all.subset(&indices(&assign, Split::Val)),
                test: all.subset(&indices(&assign, Split::Test)),
                class_names: ds.class_names.clone(),
                synthetic: Some((ds, assign)),
                manifest: None,
            })
        }
        DataConfig::Folder {
            root,
            class_map,
            fractions,
            manifest,
        } => {
            let m = match manifest {
                Some(path) => DatasetManifest::load(path)?,
                None => split(&scan_folder(root, *class_map)?, *fractions, cfg.seed)?,
            };
            if m.entries.iter().any(|e| e.split.is_none()) {
                return Err(Error::Config(
                    "manifest has entries without a split assignment".into(),
                ));
            }
            Ok(PreparedData {
                train: Samples::from_manifest(&m, Split::Train, &cfg.preprocess, size)?,
                val: Samples::from_manifest(&m, Split::Val, &cfg.preprocess, size)?,
                test: Samples::from_manifest(&m, Split::Test, &cfg.preprocess, size)?,
                class_names: m.class_names.clone(),
                synthetic: None,
                manifest: Some(m),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stop_reason: StopReason,
    pub epochs: u64,
    pub last: Option<EpochRecord>,
    pub best_val_loss: Option<f64>,
    /// Split the report was computed on.
    pub report_split: Split,
    pub report: EvalReport,
}

/// Trains according to `cfg`, writing checkpoints, `curves.csv`,
/// `report.json` and `confusion.csv` into `out_dir`. With `resume`, the
/// state stored in that checkpoint is continued.
pub fn run_training(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    match cfg.model.precision {
        DType::F32 => run_typed::<f32>(cfg, out_dir, resume),
        DType::F64 => run_typed::<f64>(cfg, out_dir, resume),
    }
}

fn run_typed<T: Scalar>(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary> {
    let mut state = match resume {
        Some(path) => {
            let (state, stored) = load_checkpoint::<T>(path)?;
            if stored.model != cfg.model || stored.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "{} was trained with a different model or seed",
                    path.display()
                )));
            }
            state
        }
        None => TrainState::<T>::new(&cfg.model, cfg.seed)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data = prepare_data::<T>(cfg)?;
    if let Some(m) = &data.manifest {
        m.save(out_dir.join("manifest.json"))?;
    }
    log::info!(
        "data: {} train, {} val, {} test samples; {} parameters",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        state.params.num_scalars()
    );

    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut best: CctParams<Tensor<T>> = match resume {
        Some(_) if best_path.is_file() => load_checkpoint::<T>(&best_path)?.0.params,
        _ => state.params.clone(),
    };
    let opt = &cfg.optimizer;
    let val = (!data.val.is_empty()).then_some(&data.val);
    let reason = loop {
        if let Some(r) = stop_reason(&state, opt) {
            break r;
        }
        let (rec, improved) =
            train_epoch(&mut state, &data.train, val, &cfg.augment, &cfg.model, opt)?;
        log::info!(
            "epoch {:>3}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
            rec.epoch,
            rec.train_loss,
            rec.train_acc,
            rec.val_loss,
            rec.val_acc
        );
        if improved {
            best = state.params.clone();
            save_checkpoint(&best_path, &state, cfg)?;
        }
        save_checkpoint(&last_path, &state, cfg)?;
        export_curves(&state, out_dir.join(CURVES))?;
    };
    log::info!("stopped after epoch {}: {reason:?}", state.epoch);

    let (report_split, samples) = if !data.test.is_empty() {
        (Split::Test, &data.test)
    } else if !data.val.is_empty() {
        (Split::Val, &data.val)
    } else {
        (Split::Train, &data.train)
    };
    let (_, _, preds) = evaluate_split(&best, samples, &cfg.model, opt.batch_size)?;
    let report = evaluate_labels(&samples.labels, &preds, &data.class_names)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    report.write(out_dir)?;
    Ok(RunSummary {
        stop_reason: reason,
        epochs: state.epoch,
        last: state.history.last().copied(),
        best_val_loss: state.best_val_loss,
        report_split,
        report,
    })
}

/// Default output directory of a config: its `out_dir`, else `out`.
pub fn out_dir_for(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}
