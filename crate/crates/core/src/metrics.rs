//! Classification metrics and per-image pixel statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::ImageU8;

/// `counts[t][p]`: rows are true classes, columns predictions.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], n: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion_matrix",
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    let mut m = vec![vec![0u64; n]; n];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n || p >= n {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                classes: n,
            });
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Fraction of positions where the labels differ.
pub fn hamming_loss(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            op: "hamming_loss",
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("hamming_loss of zero labels".into()));
    }
    let wrong = truth.iter().zip(pred).filter(|(t, p)| t != p).count();
    Ok(wrong as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when the metric had a zero denominator and was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub accuracy: f64,
    pub hamming_loss: f64,
    pub total: u64,
    pub warnings: Vec<String>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Per-class precision, recall and F1 with macro and support-weighted
/// averages. Zero denominators give 0 and set the matching flag.
/// `class_names` may be empty, in which case classes are named by index.
pub fn prf1_report(confusion: &[Vec<u64>], class_names: &[String]) -> Result<EvalReport> {
    let n = confusion.len();
    if confusion.iter().any(|row| row.len() != n) {
        return Err(Error::InvalidShape {
            shape: vec![n, confusion.first().map_or(0, Vec::len)],
            reason: "confusion matrix must be square".into(),
        });
    }
    if !class_names.is_empty() && class_names.len() != n {
        return Err(Error::ShapeMismatch {
            op: "prf1_report class names",
            lhs: vec![class_names.len()],
            rhs: vec![n],
        });
    }
    let total: u64 = confusion.iter().flatten().sum();
    let mut warnings = Vec::new();
    let mut per_class = Vec::with_capacity(n);
    for c in 0..n {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let (precision, precision_undefined) = ratio(tp, predicted);
        let (recall, recall_undefined) = ratio(tp, support);
        let (f1, f1_undefined) = ratio(2 * tp, support + predicted);
        let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        if recall_undefined {
            warnings.push(format!(
                "class {name} has no true samples; recall reported as 0"
            ));
        }
        if precision_undefined {
            warnings.push(format!(
                "class {name} was never predicted; precision reported as 0"
            ));
        }
        per_class.push(ClassMetrics {
            name,
            precision,
            recall,
            f1,
            support,
            precision_undefined,
            recall_undefined,
            f1_undefined,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class
                .iter()
                .map(|m| f(m) * m.support as f64)
                .sum::<f64>()
                / total as f64
        }
    };
    let macro_avg = Averages {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    let weighted_avg = Averages {
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        f1: weighted(|m| m.f1),
    };
    let correct: u64 = (0..n).map(|c| confusion[c][c]).sum();
    let (accuracy, hamming_loss) = if total == 0 {
        warnings.push("no samples; accuracy and hamming loss reported as 0".into());
        (0.0, 0.0)
    } else {
        (
            correct as f64 / total as f64,
            (total - correct) as f64 / total as f64,
        )
    };
    Ok(EvalReport {
        confusion: confusion.to_vec(),
        per_class,
        macro_avg,
        weighted_avg,
        accuracy,
        hamming_loss,
        total,
        warnings,
    })
}

/// Convenience: confusion matrix and report from raw label pairs.
pub fn evaluate_labels(
    truth: &[usize],
    pred: &[usize],
    class_names: &[String],
) -> Result<EvalReport> {
    prf1_report(
        &confusion_matrix(truth, pred, class_names.len())?,
        class_names,
    )
}

impl EvalReport {
    pub fn confusion_csv(&self) -> String {
        let names: Vec<&str> = self.per_class.iter().map(|m| m.name.as_str()).collect();
        let mut s = format!("true\\pred,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }

    /// Writes `report.json` and `confusion.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("confusion.csv");
        fs::write(&csv, self.confusion_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Mean, max and min of an image's luminance scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub path: PathBuf,
    pub label: usize,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

pub fn image_stats(img: &ImageU8) -> (f64, f64, f64) {
    let gray = img.to_gray();
    let d = gray.data();
    let sum: u64 = d.iter().map(|&v| v as u64).sum();
    let max = d.iter().copied().max().unwrap_or(0);
    let min = d.iter().copied().min().unwrap_or(0);
    (
        sum as f64 / d.len() as f64 / 255.0,
        max as f64 / 255.0,
        min as f64 / 255.0,
    )
}

/// Loads every `(path, label)` image and computes its statistics, keeping
/// input order. Fails on the first unreadable file.
pub fn pixel_stats(items: &[(PathBuf, usize)]) -> Result<Vec<PixelStats>> {
    items
        .par_iter()
        .map(|(path, label)| {
            let (mean, max, min) = image_stats(&ImageU8::load(path)?);
            Ok(PixelStats {
                path: path.clone(),
                label: *label,
                mean,
                max,
                min,
            })
        })
        .collect()
}

pub fn pixel_stats_csv(stats: &[PixelStats]) -> String {
    let mut s = String::from("path,label,mean,max,min\n");
    for p in stats {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_field(&p.path.display().to_string()),
            p.label,
            p.mean,
            p.max,
            p.min
        );
    }
    s
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

/// Mean of the per-image means of one class, `None` if the class is absent.
pub fn mean_of_means(stats: &[PixelStats], label: usize) -> Option<f64> {
    let v: Vec<f64> = stats
        .iter()
        .filter(|s| s.label == label)
        .map(|s| s.mean)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule: `0.9 * min(std, IQR / 1.34) * n^(-1/5)`. Falls back to
/// the standard deviation when the IQR is zero, and to 1e-3 when the sample
/// has no spread at all.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("bandwidth of zero values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let mut spread = std.min(iqr / 1.34);
    if spread <= 0.0 {
        spread = std;
    }
    if spread <= 0.0 {
        spread = 1e-3;
    }
    Ok(0.9 * spread * n.powf(-0.2))
}

/// Gaussian kernel density estimate evaluated on `grid`.
pub fn gaussian_kde(values: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let h = silverman_bandwidth(values)?;
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&x| {
            values
                .iter()
                .map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect())
}

/// Density of each statistic per class on 101 points over `[0, 1]`, as CSV
/// `statistic,label,x,density`.
pub fn pixel_kde_csv(stats: &[PixelStats]) -> Result<String> {
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let mut labels: Vec<usize> = stats.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut s = String::from("statistic,label,x,density\n");
    let pick: [(&str, fn(&PixelStats) -> f64); 3] =
        [("mean", |p| p.mean), ("max", |p| p.max), ("min", |p| p.min)];
    for (name, f) in pick {
        for &label in &labels {
            let values: Vec<f64> = stats.iter().filter(|p| p.label == label).map(f).collect();
            for (x, d) in grid.iter().zip(gaussian_kde(&values, &grid)?) {
                let _ = writeln!(s, "{name},{label},{x},{d}");
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(
            confusion_matrix(&[0, 0, 1], &[0, 1, 1], 2).unwrap(),
            vec![vec![1, 1], vec![0, 1]]
        );
        assert_eq!(
            confusion_matrix(&[], &[], 2).unwrap(),
            vec![vec![0, 0], vec![0, 0]]
        );
        assert_eq!(
            confusion_matrix(&[0, 1, 1, 2], &[0, 1, 1, 2], 3).unwrap(),
            vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]
        );
        assert!(confusion_matrix(&[0], &[0, 1], 2).is_err());
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
    }

    #[test]
    fn report_examples() {
        let r = prf1_report(&[vec![8, 2], vec![1, 9]], &names(2)).unwrap();
        let c0 = &r.per_class[0];
        assert!((c0.precision - 8.0 / 9.0).abs() < 1e-15);
        assert!((c0.recall - 0.8).abs() < 1e-15);
        assert!((c0.f1 - 0.8421052631578947).abs() < 1e-12);
        assert!((r.accuracy - 0.85).abs() < 1e-15);
        assert!((r.weighted_avg.recall - r.accuracy).abs() < 1e-15);

        let r = prf1_report(&[vec![3, 0], vec![0, 5]], &[]).unwrap();
        assert!(r
            .per_class
            .iter()
            .all(|m| m.precision == 1.0 && m.recall == 1.0 && m.f1 == 1.0));
        assert_eq!(
            r.macro_avg,
            Averages {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
        assert!(r.warnings.is_empty());

        let r = prf1_report(&[vec![4, 0], vec![0, 0]], &names(2)).unwrap();
        assert!(r.per_class[1].recall_undefined && r.per_class[1].precision_undefined);
        assert_eq!(r.per_class[1].recall, 0.0);
        assert!(!r.warnings.is_empty());
        assert!(prf1_report(&[vec![1, 2]], &[]).is_err());
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming_loss(&[0, 1, 1], &[0, 1, 1]).unwrap(), 0.0);
        assert_eq!(hamming_loss(&[0, 1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(hamming_loss(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.25);
        assert!(hamming_loss(&[], &[]).is_err());
    }

    #[test]
    fn pixel_stat_examples() {
        let (mean, max, min) = image_stats(&ImageU8::filled(3, 3, 1, 128).unwrap());
        for v in [mean, max, min] {
            assert!((v - 0.50196).abs() < 1e-5);
        }
        let (_, max, min) = image_stats(&ImageU8::gray(1, 3, vec![0, 7, 255]).unwrap());
        assert_eq!((min, max), (0.0, 1.0));

        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        ImageU8::filled(4, 4, 1, 0).unwrap().save_png(&a).unwrap();
        ImageU8::filled(4, 4, 1, 255).unwrap().save_png(&b).unwrap();
        let stats = pixel_stats(&[(a, 1), (b, 1)]).unwrap();
        assert_eq!(mean_of_means(&stats, 1), Some(0.5));
        assert_eq!(mean_of_means(&stats, 0), None);
        let csv = pixel_stats_csv(&stats);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("path,label,mean,max,min\n"));
        let kde = pixel_kde_csv(&stats).unwrap();
        assert_eq!(kde.lines().count(), 1 + 3 * 101);

        let missing = dir.path().join("missing.png");
        let err = pixel_stats(&[(missing.clone(), 0)]).unwrap_err();
        assert!(err.to_string().contains("missing.png"));
    }

    #[test]
    fn kde_integrates_to_one() {
        let values = [0.2, 0.25, 0.3, 0.31, 0.5, 0.52, 0.6];
        let grid: Vec<f64> = (0..=4000).map(|i| -1.0 + i as f64 / 1000.0).collect();
        let d = gaussian_kde(&values, &grid).unwrap();
        let integral: f64 = d.iter().sum::<f64>() / 1000.0;
        assert!((integral - 1.0).abs() < 1e-6);
        // hand value: std of the sample and IQR by linear interpolation
        let h = silverman_bandwidth(&values).unwrap();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        let iqr = 0.51 - 0.275;
        assert!((h - 0.9 * std.min(iqr / 1.34) * n.powf(-0.2)).abs() < 1e-12);
    }
}
