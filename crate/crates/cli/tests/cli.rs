use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cct_core::preprocess::ImageU8;

fn cct(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cct"))
        .current_dir(dir)
        .args(["--threads", "1", "--log", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{
  "model": {"input_size": 32, "embed_dim": 16, "heads": 2, "encoder_layers": 1, "precision": "f64"},
  "optimizer": {"epochs": 3, "batch_size": 8},
  "data": {"kind": "synthetic", "n_per_class": 12, "image_size": 32, "fractions": [0.5, 0.25, 0.25]},
  "seed": 9
}"#;

fn ramp_png(path: &Path, h: usize, w: usize, shift: usize) {
    let data = (0..h * w)
        .map(|i| ((i * 7 + shift * 31 + i / w * 3) % 256) as u8)
        .collect();
    ImageU8::gray(h, w, data).unwrap().save_png(path).unwrap();
}

#[test]
fn help_version_and_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let o = cct(dir.path(), &["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("selftest"));
    for sub in ["train", "explain", "dataset"] {
        assert_eq!(code(&cct(dir.path(), &[sub, "--help"])), 0, "{sub}");
    }
    let o = cct(dir.path(), &["--version"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("cct "));

    let o = cct(dir.path(), &["train", "--config", "x.json", "--frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--frobnicate"));
    assert_eq!(code(&cct(dir.path(), &["launch"])), 1);
    assert_eq!(code(&cct(dir.path(), &["--threads", "0", "selftest"])), 1);
}

#[test]
fn selftest_prints_a_passing_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = cct(dir.path(), &["selftest"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(
        out.lines().filter(|l| l.starts_with("PASS")).count(),
        6,
        "{out}"
    );
    assert!(out.contains("gradient check"));
}

#[test]
fn config_errors_exit_before_training() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.json"),
        r#"{"data": {"kind": "folder", "root": "no/such/dir"}, "out_dir": "out"}"#,
    )
    .unwrap();
    let o = cct(dir.path(), &["train", "--config", "run.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no/such/dir"));
    assert!(!dir.path().join("out").exists());

    fs::write(dir.path().join("bad.json"), r#"{"optimiser": {}}"#).unwrap();
    let o = cct(dir.path(), &["train", "--config", "bad.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("optimiser"));

    let o = cct(dir.path(), &["train", "--config", "absent.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_explain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.json"), SMALL).unwrap();
    for out in ["a", "b"] {
        let o = cct(d, &["train", "--config", "small.json", "--out-dir", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in [
        "ckpt_best.cct",
        "ckpt_last.cct",
        "curves.csv",
        "report.json",
        "confusion.csv",
    ] {
        assert!(d.join("a").join(f).is_file(), "{f}");
    }
    let curves = fs::read_to_string(d.join("a/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 4);
    assert_eq!(curves, fs::read_to_string(d.join("b/curves.csv")).unwrap());

    let o = cct(
        d,
        &[
            "eval",
            "--ckpt",
            "a/ckpt_last.cct",
            "--split",
            "val",
            "--out-dir",
            "ev",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["total"], 6);
    assert!(fs::read_to_string(d.join("ev/confusion.csv"))
        .unwrap()
        .starts_with("true\\pred,healthy,diseased"));

    ramp_png(&d.join("x.png"), 40, 50, 0);
    let o = cct(
        d,
        &[
            "explain",
            "--image",
            "x.png",
            "--ckpt",
            "a/ckpt_best.cct",
            "--class",
            "1",
            "--out",
            "cam/x.png",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("cam/x.json")).unwrap()).unwrap();
    assert_eq!(side["target_class"], 1);
    let p: Vec<f64> = side["probabilities"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let heat = ImageU8::load(d.join("cam/x.png")).unwrap();
    assert_eq!((heat.height(), heat.width(), heat.channels()), (40, 50, 1));
    let over = ImageU8::load(d.join("cam/x.overlay.png")).unwrap();
    assert_eq!((over.height(), over.width(), over.channels()), (40, 50, 3));

    let o = cct(
        d,
        &[
            "explain",
            "--image",
            "x.png",
            "--ckpt",
            "a/ckpt_best.cct",
            "--class",
            "two",
            "--out",
            "y.png",
        ],
    );
    assert_eq!(code(&o), 1);
    let o = cct(
        d,
        &[
            "explain",
            "--image",
            "x.png",
            "--ckpt",
            "a/ckpt_best.cct",
            "--class",
            "5",
            "--out",
            "y.png",
        ],
    );
    assert_eq!(code(&o), 1);
    let o = cct(
        d,
        &[
            "explain",
            "--image",
            "x.png",
            "--ckpt",
            "a/missing.cct",
            "--out",
            "y.png",
        ],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn resume_continues_the_same_history() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("full.json"), SMALL).unwrap();
    fs::write(
        d.join("short.json"),
        SMALL.replace(r#""epochs": 3"#, r#""epochs": 1"#),
    )
    .unwrap();
    assert_eq!(
        code(&cct(
            d,
            &["train", "--config", "full.json", "--out-dir", "full"]
        )),
        0
    );
    assert_eq!(
        code(&cct(
            d,
            &["train", "--config", "short.json", "--out-dir", "part"]
        )),
        0
    );
    let o = cct(
        d,
        &[
            "train",
            "--config",
            "full.json",
            "--out-dir",
            "part",
            "--resume",
            "part/ckpt_last.cct",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(d.join("full/curves.csv")).unwrap(),
        fs::read_to_string(d.join("part/curves.csv")).unwrap()
    );
}

#[test]
fn preprocess_augment_dataset_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ramp_png(&d.join("chest.png"), 48, 40, 1);
    let o = cct(
        d,
        &[
            "preprocess",
            "chest.png",
            "--out-dir",
            "pre",
            "--dump-intermediate",
            "stages",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pre = ImageU8::load(d.join("pre/chest.png")).unwrap();
    assert_eq!((pre.height(), pre.width()), (64, 128));
    for f in ["chest.clahe.png", "chest.bg.png"] {
        let img = ImageU8::load(d.join("stages").join(f)).unwrap();
        assert_eq!((img.height(), img.width()), (48, 40), "{f}");
    }

    let o = cct(
        d,
        &[
            "augment-preview",
            "--image",
            "chest.png",
            "--n",
            "3",
            "--out-dir",
            "aug",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!((0..3).all(|i| d.join(format!("aug/chest.aug{i}.png")).is_file()));

    for (folder, n) in [("Normal", 3), ("COVID", 2), ("Lung_Opacity", 3)] {
        fs::create_dir_all(d.join("ds").join(folder)).unwrap();
        for i in 0..n {
            ramp_png(
                &d.join("ds").join(folder).join(format!("{i}.png")),
                12,
                12,
                i + n,
            );
        }
    }
    assert_eq!(
        code(&cct(
            d,
            &["dataset", "scan", "--root", "ds", "--out", "m.json"]
        )),
        0
    );
    let o = cct(
        d,
        &[
            "dataset",
            "split",
            "--manifest",
            "m.json",
            "--fractions",
            "0.6,0.2,0.2",
            "--out",
            "s.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("s.json")).unwrap()).unwrap();
    let entries = m["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 8);
    assert!(entries.iter().all(|e| e["split"].is_string()));
    assert_eq!(
        code(&cct(
            d,
            &[
                "dataset",
                "split",
                "--manifest",
                "m.json",
                "--fractions",
                "0.6,0.4"
            ]
        )),
        1
    );
    assert_eq!(code(&cct(d, &["dataset", "scan", "--root", "nowhere"])), 1);

    let o = cct(d, &["stats", "--manifest", "s.json", "--out-dir", "st"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("st/pixel_stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    let kde = fs::read_to_string(d.join("st/pixel_kde.csv")).unwrap();
    // 3 statistics x 2 labels x 101 grid points
    assert_eq!(kde.lines().count(), 1 + 3 * 2 * 101);
}
