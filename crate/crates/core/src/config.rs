//! Run configuration: everything a training run needs, read from JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::dataset::ClassMap;
use crate::error::{Error, Result};
use crate::model::CctConfig;
use crate::preprocess::PreprocessConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Accuracies at which a run may stop before its epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopTargets {
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: u64,
    /// Stop after this many epochs without a lower validation loss.
    pub early_stop_patience: Option<u64>,
    pub stop_at: Option<StopTargets>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 150,
            early_stop_patience: None,
            stop_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated blob images; `n_per_class` is split by `fractions`.
    Synthetic {
        n_per_class: usize,
        image_size: usize,
        fractions: (f64, f64, f64),
    },
    /// `<root>/<ClassName>/*.png`, or a saved manifest with split
    /// assignments.
    Folder {
        root: PathBuf,
        #[serde(default)]
        class_map: ClassMap,
        #[serde(default = "default_fractions")]
        fractions: (f64, f64, f64),
        #[serde(default)]
        manifest: Option<PathBuf>,
    },
}

fn default_fractions() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

impl DataConfig {
    pub fn class_names(&self) -> Vec<String> {
        match self {
            DataConfig::Synthetic { .. } => ClassMap::Binary.class_names(),
            DataConfig::Folder { class_map, .. } => class_map.class_names(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            n_per_class: 250,
            image_size: 64,
            fractions: (0.8, 0.2, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: CctConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentPolicy,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    /// Drives initialization, shuffling, dropout, splits and synthetic data.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative dataset paths are taken
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let DataConfig::Folder { root, manifest, .. } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            if root.is_relative() {
                *root = base.join(&*root);
            }
            if let Some(m) = manifest.as_mut().filter(|m| m.is_relative()) {
                *m = base.join(&*m);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that can be checked before work starts, including
    /// the presence of dataset folders.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.seq_len()?;
        self.preprocess.validate()?;
        self.augment.validate()?;
        if self.model.input_channels != self.preprocess.channels() {
            return Err(Error::Config(format!(
                "model.input_channels is {} but preprocessing produces {} channel(s)",
                self.model.input_channels,
                self.preprocess.channels()
            )));
        }
        let o = &self.optimizer;
        let a = &o.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                a.lr
            )));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) || !(a.eps > 0.0) {
            return Err(Error::Config(
                "adam needs betas in [0, 1) and eps > 0".into(),
            ));
        }
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        let check_fractions = |(t, v, e): (f64, f64, f64)| {
            if [t, v, e].iter().any(|f| !(*f >= 0.0))
                || !(t > 0.0)
                || (t + v + e - 1.0).abs() > 1e-9
            {
                return Err(Error::Config(format!(
                    "split fractions must be >= 0 with positive train and sum to 1, got ({t}, {v}, {e})"
                )));
            }
            Ok(())
        };
        match &self.data {
            DataConfig::Synthetic {
                n_per_class,
                image_size,
                fractions,
            } => {
                check_fractions(*fractions)?;
                if *n_per_class == 0 || *image_size < 16 {
                    return Err(Error::Config(
                        "synthetic data needs n_per_class >= 1 and image_size >= 16".into(),
                    ));
                }
                if self.model.num_classes != 2 {
                    return Err(Error::Config(
                        "synthetic data has 2 classes; set model.num_classes = 2".into(),
                    ));
                }
            }
            DataConfig::Folder {
                root,
                class_map,
                fractions,
                manifest,
            } => {
                check_fractions(*fractions)?;
                match manifest {
                    Some(m) if !m.is_file() => {
                        return Err(Error::Config(format!("manifest {} not found", m.display())))
                    }
                    Some(_) => {}
                    None if !root.is_dir() => return Err(Error::MissingFolder(root.clone())),
                    None => {}
                }
                let n = class_map.class_names().len();
                if self.model.num_classes != n {
                    return Err(Error::Config(format!(
                        "model.num_classes is {} but the {class_map:?} class map has {n} classes",
                        self.model.num_classes
                    )));
                }
            }
        }
        Ok(())
    }
}
