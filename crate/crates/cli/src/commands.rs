use std::fs;
use std::path::{Path, PathBuf};

use cct_core::augment::sample_augment;
use cct_core::checkpoint::{load_checkpoint, read_header};
use cct_core::config::RunConfig;
use cct_core::dataset::{scan_folder, split, ClassMap, DatasetManifest, Split};
use cct_core::gradcam::{grad_cam, overlay, pool_attention_map, Heatmap};
use cct_core::metrics::{
    evaluate_labels, mean_of_means, pixel_kde_csv, pixel_stats, pixel_stats_csv,
};
use cct_core::model::{forward, register_constants};
use cct_core::preprocess::{ben_graham, preprocess_pipeline, preprocess_stages, ImageU8};
use cct_core::run::{out_dir_for, prepare_data, run_training};
use cct_core::train::{augment_stream, evaluate_split};
use cct_core::{selftest as suites, DType, Graph, Scalar, Tensor};
use serde_json::json;

use crate::Failure;

type CmdResult = Result<(), Failure>;

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Channels of a `[C, H, W]` tensor in `[0, 1]`, side by side as one gray
/// image.
fn channels_image<T: Scalar>(t: &Tensor<T>) -> Result<ImageU8, Failure> {
    let [c, h, w] = *t.shape() else {
        return Err(Failure::runtime(format!(
            "expected a [C, H, W] tensor, got {:?}",
            t.shape()
        )));
    };
    let mut data = vec![0u8; h * w * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = t.data()[(ch * h + y) * w + x].f64();
                data[y * w * c + ch * w + x] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(ImageU8::gray(h, w * c, data)?)
}

pub fn preprocess(
    images: &[PathBuf],
    config: Option<&Path>,
    out_dir: &Path,
    dump: Option<&Path>,
) -> CmdResult {
    let cfg = load_config(config)?;
    create_dir(out_dir)?;
    if let Some(d) = dump {
        create_dir(d)?;
    }
    for path in images {
        let img = ImageU8::load(path)?;
        let name = stem(path);
        let t: Tensor<f32> = preprocess_pipeline(&img, &cfg.preprocess, cfg.model.input_size)?;
        channels_image(&t)?.save_png(out_dir.join(format!("{name}.png")))?;
        if let Some(d) = dump {
            let stages = preprocess_stages(&img, &cfg.preprocess)?;
            let bg = match stages.ben_graham {
                Some(bg) => bg,
                None => ben_graham(&stages.clahe, &cfg.preprocess.ben_graham)?,
            };
            stages.clahe.save_png(d.join(format!("{name}.clahe.png")))?;
            bg.save_png(d.join(format!("{name}.bg.png")))?;
        }
        log::info!(
            "{} -> {}",
            path.display(),
            out_dir.join(format!("{name}.png")).display()
        );
    }
    Ok(())
}

pub fn augment_preview(image: &Path, config: Option<&Path>, n: usize, out_dir: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    create_dir(out_dir)?;
    let img = ImageU8::load(image)?;
    let t: Tensor<f32> = preprocess_pipeline(&img, &cfg.preprocess, cfg.model.input_size)?;
    let name = stem(image);
    for i in 0..n {
        let a = sample_augment(&t, &cfg.augment, augment_stream(0, i))?;
        channels_image(&a)?.save_png(out_dir.join(format!("{name}.aug{i}.png")))?;
    }
    log::info!(
        "wrote {n} variants of {} to {}",
        image.display(),
        out_dir.display()
    );
    Ok(())
}

pub fn dataset_scan(root: &Path, map: ClassMap, out: &Path) -> CmdResult {
    let m = scan_folder(root, map)?;
    m.save(out)?;
    log::info!(
        "{} images ({} skipped) in {} classes -> {}",
        m.entries.len(),
        m.skipped.len(),
        m.class_names.len(),
        out.display()
    );
    Ok(())
}

pub fn dataset_split(
    manifest: &Path,
    fractions: (f64, f64, f64),
    seed: u64,
    out: Option<&Path>,
) -> CmdResult {
    let m = DatasetManifest::load(manifest)?;
    let m = split(&m, fractions, seed)?;
    m.save(out.unwrap_or(manifest))?;
    let count = |s| m.split_entries(s).len();
    log::info!(
        "split: {} train, {} val, {} test",
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

pub fn train(config: &Path, out_dir: Option<PathBuf>, resume: Option<&Path>) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let out = out_dir_for(&cfg, out_dir);
    let summary = run_training(&cfg, &out, resume)?;
    log::info!(
        "{:?} after {} epochs; {} accuracy {:.4}; artifacts in {}",
        summary.stop_reason,
        summary.epochs,
        format!("{:?}", summary.report_split).to_lowercase(),
        summary.report.accuracy,
        out.display()
    );
    Ok(())
}

pub fn eval(ckpt: &Path, config: Option<&Path>, which: Option<Split>, out_dir: &Path) -> CmdResult {
    match read_header(ckpt)?.dtype {
        DType::F32 => eval_typed::<f32>(ckpt, config, which, out_dir),
        DType::F64 => eval_typed::<f64>(ckpt, config, which, out_dir),
    }
}

fn eval_typed<T: Scalar>(
    ckpt: &Path,
    config: Option<&Path>,
    which: Option<Split>,
    out_dir: &Path,
) -> CmdResult {
    let (state, mut cfg) = load_checkpoint::<T>(ckpt)?;
    if let Some(p) = config {
        let other = RunConfig::load(p)?;
        cfg.data = other.data;
        cfg.validate()?;
    }
    let data = prepare_data::<T>(&cfg)?;
    let (split, samples) = match which {
        Some(Split::Train) => (Split::Train, &data.train),
        Some(Split::Val) => (Split::Val, &data.val),
        Some(Split::Test) => (Split::Test, &data.test),
        None if !data.test.is_empty() => (Split::Test, &data.test),
        None => (Split::Val, &data.val),
    };
    if samples.is_empty() {
        return Err(Failure::usage(format!("the {split:?} split is empty")));
    }
    let (loss, _, preds) =
        evaluate_split(&state.params, samples, &cfg.model, cfg.optimizer.batch_size)?;
    let report = evaluate_labels(&samples.labels, &preds, &data.class_names)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    create_dir(out_dir)?;
    report.write(out_dir)?;
    log::info!(
        "{split:?}: {} samples, loss {loss:.4}, accuracy {:.4}, macro F1 {:.4}",
        samples.len(),
        report.accuracy,
        report.macro_avg.f1
    );
    Ok(())
}

pub fn stats(
    root: Option<&Path>,
    manifest: Option<&Path>,
    map: ClassMap,
    out_dir: &Path,
) -> CmdResult {
    let m = match (manifest, root) {
        (Some(p), _) => DatasetManifest::load(p)?,
        (None, Some(r)) => scan_folder(r, map)?,
        (None, None) => return Err(Failure::usage("either --root or --manifest is required")),
    };
    let items: Vec<(PathBuf, usize)> = m
        .entries
        .iter()
        .map(|e| (e.path.clone(), e.label))
        .collect();
    let stats = pixel_stats(&items)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join("pixel_stats.csv"), &pixel_stats_csv(&stats))?;
    write_file(&out_dir.join("pixel_kde.csv"), &pixel_kde_csv(&stats)?)?;
    for (label, name) in m.class_names.iter().enumerate() {
        if let Some(mean) = mean_of_means(&stats, label) {
            log::info!("{name}: mean pixel value {mean:.4}");
        }
    }
    Ok(())
}

pub fn explain(
    image: &Path,
    ckpt: &Path,
    class: Option<usize>,
    out: &Path,
    alpha: f64,
    pool: bool,
) -> CmdResult {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Failure::usage(format!(
            "--alpha must be in [0, 1], got {alpha}"
        )));
    }
    match read_header(ckpt)?.dtype {
        DType::F32 => explain_typed::<f32>(image, ckpt, class, out, alpha, pool),
        DType::F64 => explain_typed::<f64>(image, ckpt, class, out, alpha, pool),
    }
}

fn explain_typed<T: Scalar>(
    image: &Path,
    ckpt: &Path,
    class: Option<usize>,
    out: &Path,
    alpha: f64,
    pool: bool,
) -> CmdResult {
    let (state, cfg) = load_checkpoint::<T>(ckpt)?;
    let n = cfg.model.num_classes;
    if let Some(c) = class.filter(|&c| c >= n) {
        return Err(Failure::usage(format!(
            "--class {c} out of range for {n} classes"
        )));
    }
    let img = ImageU8::load(image)?;
    let x = preprocess_pipeline::<T>(&img, &cfg.preprocess, cfg.model.input_size)?;
    let x = Tensor::stack(&[&x])?;

    let mut g = Graph::new();
    let p = register_constants(&mut g, &state.params);
    let xv = g.constant(x.clone());
    let fwd = forward(&mut g, xv, &p, &cfg.model, None)?;
    let probs = g.softmax(fwd.logits, 1)?;
    let probs: Vec<f64> = g.value(probs).data().iter().map(|v| v.f64()).collect();
    let predicted = cct_core::model::argmax_rows(&probs, n)[0];

    let hm: Heatmap = if pool {
        let w: Vec<f64> = g
            .value(fwd.pool_weights)
            .data()
            .iter()
            .map(|v| v.f64())
            .collect();
        pool_attention_map(&w, &cfg.model, predicted)?
    } else {
        grad_cam(&x, &state.params, &cfg.model, class)?
    };
    let full = hm.resized(img.height(), img.width());

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let overlay_path = out.with_extension("overlay.png");
    let sidecar_path = out.with_extension("json");
    full.to_image().save_png(out)?;
    overlay(&img, &full, alpha)?.save_png(&overlay_path)?;
    let sidecar = json!({
        "image": image,
        "checkpoint": ckpt,
        "source": hm.source,
        "predicted_class": predicted,
        "predicted_name": cfg.data.class_names().get(predicted),
        "target_class": hm.target_class,
        "probabilities": probs,
        "degenerate": hm.is_degenerate(),
        "heatmap": out,
        "overlay": overlay_path,
    });
    write_file(
        &sidecar_path,
        &serde_json::to_string_pretty(&sidecar).expect("json value serializes"),
    )?;
    log::info!(
        "predicted class {predicted} (p = {:.4}); heatmap for class {} -> {}",
        probs[predicted],
        hm.target_class,
        out.display()
    );
    Ok(())
}

pub fn selftest(as_json: bool) -> CmdResult {
    let rows = suites::run_all()?;
    if as_json {
        println!(
            "{}",
            serde_json::to_string_pretty(&rows).expect("rows serialize")
        );
    } else {
        for r in &rows {
            println!("{}", r.line());
        }
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::runtime(format!(
            "{failed} of {} checks failed",
            rows.len()
        )));
    }
    Ok(())
}
