//! Labelled image folders, stratified splits, batching and the synthetic
//! blob dataset used for desk-scale runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{preprocess_pipeline, ImageU8, PreprocessConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Folder name to class assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassMap {
    /// Normal is healthy; COVID, Viral Pneumonia and Lung_Opacity are diseased.
    #[default]
    Binary,
    /// One class per radiography folder.
    FourClass,
}

impl ClassMap {
    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            ClassMap::Binary => &["healthy", "diseased"],
            ClassMap::FourClass => &["Normal", "COVID", "Viral Pneumonia", "Lung_Opacity"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// `(folder, label)` pairs in label order.
    pub fn folders(self) -> Vec<(&'static str, usize)> {
        match self {
            ClassMap::Binary => vec![
                ("Normal", 0),
                ("COVID", 1),
                ("Viral Pneumonia", 1),
                ("Lung_Opacity", 1),
            ],
            ClassMap::FourClass => vec![
                ("Normal", 0),
                ("COVID", 1),
                ("Viral Pneumonia", 2),
                ("Lung_Opacity", 3),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub class_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Seed of the split, once assigned.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Files found but not readable as images.
    #[serde(default)]
    pub skipped: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == Some(split))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if let Some(e) = m.entries.iter().find(|e| e.label >= m.class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: e.label,
                classes: m.class_names.len(),
            });
        }
        Ok(m)
    }
}

fn is_png(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Enumerates `<root>/<folder>/*.png` for every folder of the class map.
/// Absent folders contribute nothing; a class left without images is an
/// error. Files whose header cannot be decoded are skipped with a warning.
pub fn scan_folder(root: impl AsRef<Path>, map: ClassMap) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::MissingFolder(root.to_path_buf()));
    }
    let class_names = map.class_names();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (folder, label) in map.folders() {
        let dir = root.join(folder);
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_png(p))
            .collect();
        files.sort();
        for path in files {
            match image::image_dimensions(&path) {
                Ok(_) => entries.push(ManifestEntry {
                    path,
                    label,
                    class_name: class_names[label].clone(),
                    split: None,
                }),
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", path.display());
                    skipped.push(path);
                }
            }
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    for (label, name) in class_names.iter().enumerate() {
        if !entries.iter().any(|e| e.label == label) {
            return Err(Error::Empty(format!(
                "class {name:?} has no readable images under {}",
                root.display()
            )));
        }
    }
    Ok(DatasetManifest {
        class_names,
        entries,
        seed: None,
        skipped,
    })
}

/// Stratified assignment of every label to a split. Per class the members
/// are shuffled, the first `floor(n * val)` go to validation, test takes
/// up to `floor(n * (val + test))` and the remainder goes to training.
pub fn stratified_split(
    labels: &[usize],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<Split>> {
    let (tr, va, te) = fractions;
    let ok = [tr, va, te].iter().all(|f| f.is_finite() && *f >= 0.0) && tr > 0.0;
    if !ok || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be non-negative with positive train and sum to 1, got ({tr}, {va}, {te})"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Train; labels.len()];
    for (label, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_val = (n * va + 1e-9).floor() as usize;
        let n_held = (n * (va + te) + 1e-9).floor() as usize;
        if va > 0.0 && n_val == 0 {
            log::warn!("class {label} has no samples in the validation split");
        }
        for (k, &i) in idx.iter().enumerate() {
            out[i] = if k < n_val {
                Split::Val
            } else if k < n_held {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    Ok(out)
}

pub fn split(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    let assignment = stratified_split(&manifest.labels(), fractions, seed)?;
    let mut m = manifest.clone();
    for (e, s) in m.entries.iter_mut().zip(assignment) {
        e.split = Some(s);
    }
    m.seed = Some(seed);
    Ok(m)
}

/// Ground truth of a synthetic lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub quadrant: usize,
    pub center_y: f64,
    pub center_x: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

impl Blob {
    pub fn quadrant_of(y: f64, x: f64, size: usize) -> usize {
        let half = size as f64 / 2.0;
        usize::from(y >= half) * 2 + usize::from(x >= half)
    }

    /// `(y0, y1, x0, x1)` pixel range of a quadrant, end exclusive.
    pub fn quadrant_bounds(quadrant: usize, size: usize) -> (usize, usize, usize, usize) {
        let half = size / 2;
        let (y0, y1) = if quadrant / 2 == 0 {
            (0, half)
        } else {
            (half, size)
        };
        let (x0, x1) = if quadrant.is_multiple_of(2) {
            (0, half)
        } else {
            (half, size)
        };
        (y0, y1, x0, x1)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Vec<ImageU8>,
    pub labels: Vec<usize>,
    /// `Some` exactly for label 1.
    pub blobs: Vec<Option<Blob>>,
    pub class_names: Vec<String>,
}

/// Class 0 is a smooth low-frequency noise field; class 1 is the same kind
/// of field plus a bright Gaussian blob inside a random quadrant. Samples
/// alternate between the classes and each uses its own random stream.
pub fn synth_generate(n_per_class: usize, size: usize, seed: u64) -> Result<SyntheticDataset> {
    if n_per_class == 0 || size < 16 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs n >= 1 and size >= 16, got n={n_per_class}, size={size}"
        )));
    }
    let samples: Vec<(ImageU8, usize, Option<Blob>)> = (0..2 * n_per_class)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let label = i % 2;
            let mut field = noise_field(&mut rng, size);
            let blob = (label == 1).then(|| {
                let quadrant = rng.gen_range(0..4);
                let half = size as f64 / 2.0;
                let sigma = size as f64 / 12.0;
                let margin = sigma.min(half / 4.0);
                let (qy, qx) = ((quadrant / 2) as f64 * half, (quadrant % 2) as f64 * half);
                let blob = Blob {
                    quadrant,
                    center_y: qy + rng.gen_range(margin..half - margin),
                    center_x: qx + rng.gen_range(margin..half - margin),
                    sigma,
                    amplitude: rng.gen_range(90.0..130.0),
                };
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 + 0.5 - blob.center_y).powi(2)
                            + (x as f64 + 0.5 - blob.center_x).powi(2);
                        field[y * size + x] += blob.amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
                blob
            });
            let data = field
                .iter()
                .map(|v| v.round().clamp(0.0, 255.0) as u8)
                .collect();
            (
                ImageU8::gray(size, size, data).expect("sized buffer"),
                label,
                blob,
            )
        })
        .collect();
    let mut out = SyntheticDataset {
        images: Vec::with_capacity(samples.len()),
        labels: Vec::with_capacity(samples.len()),
        blobs: Vec::with_capacity(samples.len()),
        class_names: ClassMap::Binary.class_names(),
    };
    for (img, label, blob) in samples {
        out.images.push(img);
        out.labels.push(label);
        out.blobs.push(blob);
    }
    Ok(out)
}

/// Bilinear upsampling of a random 5x5 grid around a random base level.
fn noise_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    const G: usize = 5;
    let base = rng.gen_range(70.0..110.0);
    let grid: Vec<f64> = (0..G * G)
        .map(|_| base + rng.gen_range(-25.0..25.0))
        .collect();
    crate::preprocess::filter::resize_plane(&grid, G, G, size, size)
}

/// Model-ready samples held in memory.
#[derive(Debug, Clone)]
pub struct Samples<T> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    /// Source path or synthetic index, for reports.
    pub ids: Vec<String>,
}

impl<T: Scalar> Samples<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Samples<T> {
        Samples {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Stacks the listed samples into `[B, C, H, W]`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let parts: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.inputs[i]).collect();
        Ok((
            Tensor::stack(&parts)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    pub fn from_images(
        images: &[ImageU8],
        labels: &[usize],
        cfg: &PreprocessConfig,
        size: usize,
    ) -> Result<Self> {
        let inputs = images
            .par_iter()
            .map(|img| preprocess_pipeline(img, cfg, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Samples {
            inputs,
            labels: labels.to_vec(),
            ids: (0..labels.len())
                .map(|i| format!("synthetic:{i}"))
                .collect(),
        })
    }

    /// Loads and preprocesses the entries of one split, in manifest order.
    pub fn from_manifest(
        m: &DatasetManifest,
        split: Split,
        cfg: &PreprocessConfig,
        size: usize,
    ) -> Result<Self> {
        let entries = m.split_entries(split);
        let inputs = entries
            .par_iter()
            .map(|e| preprocess_pipeline(&ImageU8::load(&e.path)?, cfg, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Samples {
            inputs,
            labels: entries.iter().map(|e| e.label).collect(),
            ids: entries
                .iter()
                .map(|e| e.path.display().to_string())
                .collect(),
        })
    }
}

/// Shuffled index batches for one epoch. The permutation is seeded with
/// `seed ^ epoch`; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
