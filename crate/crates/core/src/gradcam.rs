//! Grad-CAM over the last tokenizer feature map, sequence-pooling saliency,
//! and colour overlays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    argmax_rows, forward_from_features, register_constants, tokenizer_features, CctConfig,
    CctParams,
};
use crate::preprocess::filter::resize_plane;
use crate::preprocess::ImageU8;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

pub const TOKENIZER_SOURCE: &str = "tokenizer.last";
pub const POOL_SOURCE: &str = "seq_pool.weights";

/// Saliency in `[0, 1]`, row-major `height x width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    pub predicted_class: usize,
    pub source: String,
}

impl Heatmap {
    pub fn is_degenerate(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Bilinear resample to a new size.
    pub fn resized(&self, height: usize, width: usize) -> Heatmap {
        let values = resize_plane(&self.values, self.height, self.width, height, width)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Heatmap {
            values,
            height,
            width,
            ..self.clone()
        }
    }

    pub fn to_image(&self) -> ImageU8 {
        let data = self
            .values
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        ImageU8::gray(self.height, self.width, data).expect("heatmap buffer matches its size")
    }

    /// Mean value over the rows `y0..y1` and columns `x0..x1`, and over
    /// the rest of the map.
    pub fn inside_outside_means(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> (f64, f64) {
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.values[y * self.width + x];
                if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                    inside += v;
                    n_in += 1;
                } else {
                    outside += v;
                    n_out += 1;
                }
            }
        }
        (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64)
    }
}

/// `(v - min) / (max - min)`; all zeros when the range is empty.
fn min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() || range <= 1e-12 * hi.abs().max(1.0) {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - lo) / range);
    }
}

/// Tokenizer feature map `A`, its gradient `dy/dA` for the target logit,
/// and the logits, for a single image `[1, C, H, W]`.
#[derive(Debug, Clone)]
pub struct FeatureGradients<T> {
    pub features: Tensor<T>,
    pub grads: Tensor<T>,
    pub logits: Vec<f64>,
    pub target_class: usize,
}

/// Runs the tokenizer, then differentiates the target logit with respect
/// to its output through the ordinary backward pass. `None` targets the
/// predicted class.
pub fn feature_gradients<T: Scalar>(
    x: &Tensor<T>,
    params: &CctParams<Tensor<T>>,
    cfg: &CctConfig,
    target: Option<usize>,
) -> Result<FeatureGradients<T>> {
    if !params.all_finite() {
        return Err(Error::NonFinite(
            "model parameters contain NaN or infinity".into(),
        ));
    }
    if x.shape().first() != Some(&1) {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "grad_cam explains one image at a time".into(),
        });
    }
    if let Some(t) = target.filter(|&t| t >= cfg.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: t,
            classes: cfg.num_classes,
        });
    }
    let features = {
        let mut g = Graph::new();
        let p = register_constants(&mut g, params);
        let xv = g.constant(x.clone());
        let a = tokenizer_features(&mut g, xv, &p, cfg)?;
        g.value(a).clone()
    };
    let mut g = Graph::new();
    let p = register_constants(&mut g, params);
    let a = g.param(features.clone());
    let out = forward_from_features(&mut g, a, &p, cfg, None)?;
    let logits: Vec<f64> = g.value(out.logits).data().iter().map(|v| v.f64()).collect();
    let target_class = target.unwrap_or_else(|| argmax_rows(&logits, cfg.num_classes)[0]);
    let y = g.select(out.logits, target_class)?;
    g.backward(y)?;
    let grads = Tensor::new(
        features.shape().to_vec(),
        g.grad(a).expect("features are a parameter").to_vec(),
    )?;
    Ok(FeatureGradients {
        features,
        grads,
        logits,
        target_class,
    })
}

/// Grad-CAM heatmap at the model input resolution. Channel weights are the
/// spatial means of `dy/dA`; the map is `ReLU(sum_d alpha_d A_d)`,
/// bilinearly upsampled and min-max normalized.
pub fn grad_cam<T: Scalar>(
    x: &Tensor<T>,
    params: &CctParams<Tensor<T>>,
    cfg: &CctConfig,
    target: Option<usize>,
) -> Result<Heatmap> {
    let fg = feature_gradients(x, params, cfg, target)?;
    let [_, d, h, w] = *fg.features.shape() else {
        unreachable!("tokenizer features are rank 4")
    };
    let a = fg.features.data();
    let da = fg.grads.data();
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for c in 0..d {
        let alpha = da[c * plane..(c + 1) * plane]
            .iter()
            .map(|v| v.f64())
            .sum::<f64>()
            / plane as f64;
        for (o, &v) in cam.iter_mut().zip(&a[c * plane..(c + 1) * plane]) {
            *o += alpha * v.f64();
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut values = resize_plane(&cam, h, w, cfg.input_size, cfg.input_size);
    min_max(&mut values);
    Ok(Heatmap {
        values,
        height: cfg.input_size,
        width: cfg.input_size,
        target_class: fg.target_class,
        predicted_class: argmax_rows(&fg.logits, cfg.num_classes)[0],
        source: TOKENIZER_SOURCE.into(),
    })
}

/// Sequence-pooling weights of one sample laid out on the token grid,
/// upsampled to the input size and min-max normalized.
pub fn pool_attention_map(
    weights: &[f64],
    cfg: &CctConfig,
    predicted_class: usize,
) -> Result<Heatmap> {
    let side = (weights.len() as f64).sqrt().round() as usize;
    if side * side != weights.len() || side != cfg.grid_size()? {
        return Err(Error::InvalidShape {
            shape: vec![weights.len()],
            reason: format!(
                "expected {} pooling weights on a square grid",
                cfg.seq_len()?
            ),
        });
    }
    let mut values = resize_plane(weights, side, side, cfg.input_size, cfg.input_size);
    min_max(&mut values);
    Ok(Heatmap {
        values,
        height: cfg.input_size,
        width: cfg.input_size,
        target_class: predicted_class,
        predicted_class,
        source: POOL_SOURCE.into(),
    })
}

/// 256-entry jet colour table: blue through cyan, yellow to red, built from
/// the piecewise-linear ramps `clamp(1.5 - |4t - k|)` for k = 3, 2, 1.
pub fn jet_table() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let t = i as f64 / 255.0;
        let ramp = |k: f64| ((1.5 - (4.0 * t - k).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
        *entry = [ramp(3.0), ramp(2.0), ramp(1.0)];
    }
    table
}

/// Alpha-blends the coloured heatmap over the grayscale image:
/// `out = (1 - alpha) * gray + alpha * colour`, rounded.
pub fn overlay(img: &ImageU8, hm: &Heatmap, alpha: f64) -> Result<ImageU8> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    if (img.height(), img.width()) != (hm.height, hm.width) {
        return Err(Error::ShapeMismatch {
            op: "overlay",
            lhs: vec![img.height(), img.width()],
            rhs: vec![hm.height, hm.width],
        });
    }
    let table = jet_table();
    let gray = img.to_gray();
    let mut out = Vec::with_capacity(gray.data().len() * 3);
    for (&g, &v) in gray.data().iter().zip(&hm.values) {
        let colour = table[(v.clamp(0.0, 1.0) * 255.0).round() as usize];
        for c in colour {
            out.push(((1.0 - alpha) * g as f64 + alpha * c as f64).round() as u8);
        }
    }
    ImageU8::new(img.height(), img.width(), 3, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hm(values: Vec<f64>, h: usize, w: usize) -> Heatmap {
        Heatmap {
            values,
            height: h,
            width: w,
            target_class: 0,
            predicted_class: 0,
            source: "test".into(),
        }
    }

    #[test]
    fn pool_map_examples() {
        let cfg = CctConfig::tiny();
        let seq = cfg.seq_len().unwrap();
        let uniform = vec![1.0 / seq as f64; seq];
        assert!((uniform.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(pool_attention_map(&uniform, &cfg, 0)
            .unwrap()
            .is_degenerate());

        let mut one_hot = vec![0.0; seq];
        one_hot[0] = 1.0;
        let m = pool_attention_map(&one_hot, &cfg, 1).unwrap();
        assert_eq!((m.height, m.width), (8, 8));
        let argmax = (0..64)
            .max_by(|&a, &b| m.values[a].total_cmp(&m.values[b]))
            .unwrap();
        assert_eq!(m.values[argmax], 1.0);
        assert!(
            argmax / 8 < 3 && argmax % 8 < 3,
            "brightest pixel {argmax} should sit in the top-left cell"
        );
        assert_eq!(m.values[63], 0.0);
        assert!(pool_attention_map(&[0.5, 0.5], &cfg, 0).is_err());
    }

    #[test]
    fn overlay_examples() {
        let img = ImageU8::gray(2, 2, vec![0, 50, 100, 250]).unwrap();
        let h = hm(vec![0.0, 0.25, 0.5, 1.0], 2, 2);
        assert_eq!(overlay(&img, &h, 0.0).unwrap(), img.to_rgb());
        let table = jet_table();
        let pure = overlay(&img, &h, 1.0).unwrap();
        for (i, v) in h.values.iter().enumerate() {
            let c = table[(v * 255.0).round() as usize];
            assert_eq!(&pure.data()[i * 3..i * 3 + 3], &c);
        }
        let half = overlay(&img, &h, 0.3).unwrap();
        for (i, &g) in img.data().iter().enumerate() {
            let c = table[(h.values[i] * 255.0).round() as usize];
            for k in 0..3 {
                let want = (0.7 * g as f64 + 0.3 * c[k] as f64).round() as u8;
                assert_eq!(half.data()[i * 3 + k], want);
            }
        }
        assert!(overlay(&img, &hm(vec![0.0; 9], 3, 3), 0.5).is_err());
        assert!(overlay(&img, &h, 1.5).is_err());
    }

    #[test]
    fn jet_endpoints() {
        let t = jet_table();
        assert_eq!(t[0], [0, 0, 128]);
        assert_eq!(t[255], [128, 0, 0]);
        assert!(t[128][1] == 255);
    }

    #[test]
    fn normalization_contract() {
        let mut v = vec![0.2, 0.4, 1.2];
        min_max(&mut v);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[2], 1.0);
        let mut c = vec![3.0; 5];
        min_max(&mut c);
        assert!(c.iter().all(|&x| x == 0.0));
    }
}
