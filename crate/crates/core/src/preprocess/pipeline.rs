use serde::{Deserialize, Serialize};

use super::filter::resize_plane;
use super::{ben_graham, clahe, BenGrahamParams, ClaheParams, ImageU8};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub clahe: ClaheParams,
    pub ben_graham: BenGrahamParams,
    /// Adds the CLAHE + Ben Graham image as a second channel.
    pub fusion: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            clahe: ClaheParams::default(),
            ben_graham: BenGrahamParams::default(),
            fusion: true,
        }
    }
}

impl PreprocessConfig {
    pub fn channels(&self) -> usize {
        if self.fusion {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.clahe.validate()?;
        self.ben_graham.validate()
    }
}

/// Bilinear resize of every channel.
pub fn resize(img: &ImageU8, out_h: usize, out_w: usize) -> Result<ImageU8> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize to {out_h}x{out_w}"
        )));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = vec![0u8; out_h * out_w * c];
    for ch in 0..c {
        let plane: Vec<f64> = img
            .data()
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|&v| v as f64)
            .collect();
        for (i, v) in resize_plane(&plane, h, w, out_h, out_w)
            .into_iter()
            .enumerate()
        {
            out[i * c + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    ImageU8::new(out_h, out_w, c, out)
}

/// Stacks the CLAHE image and its Ben Graham enhanced version as two
/// channels scaled to `[0, 1]`.
pub fn fuse<T: Scalar>(clahe_img: &ImageU8, clahe_bg_img: &ImageU8) -> Result<Tensor<T>> {
    let same =
        clahe_img.height() == clahe_bg_img.height() && clahe_img.width() == clahe_bg_img.width();
    if !same || clahe_img.channels() != 1 || clahe_bg_img.channels() != 1 {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: vec![clahe_img.height(), clahe_img.width(), clahe_img.channels()],
            rhs: vec![
                clahe_bg_img.height(),
                clahe_bg_img.width(),
                clahe_bg_img.channels(),
            ],
        });
    }
    let data = clahe_img
        .data()
        .iter()
        .chain(clahe_bg_img.data())
        .map(|&v| T::of(v as f64 / 255.0))
        .collect();
    Tensor::new([2, clahe_img.height(), clahe_img.width()], data)
}

/// Intermediate images of the preprocessing chain, at native resolution.
#[derive(Debug, Clone)]
pub struct Stages {
    pub gray: ImageU8,
    pub clahe: ImageU8,
    pub ben_graham: Option<ImageU8>,
}

pub fn preprocess_stages(img: &ImageU8, cfg: &PreprocessConfig) -> Result<Stages> {
    let gray = img.to_gray();
    let clahe = clahe(&gray, &cfg.clahe)?;
    let ben_graham = if cfg.fusion {
        Some(ben_graham(&clahe, &cfg.ben_graham)?)
    } else {
        None
    };
    Ok(Stages {
        gray,
        clahe,
        ben_graham,
    })
}

/// gray -> CLAHE -> (Ben Graham) -> resize -> `[C, size, size]` in `[0, 1]`.
pub fn preprocess_pipeline<T: Scalar>(
    img: &ImageU8,
    cfg: &PreprocessConfig,
    size: usize,
) -> Result<Tensor<T>> {
    let stages = preprocess_stages(img, cfg)?;
    let clahe_small = resize(&stages.clahe, size, size)?;
    match stages.ben_graham {
        Some(bg) => fuse(&clahe_small, &resize(&bg, size, size)?),
        None => Tensor::new(
            [1, size, size],
            clahe_small
                .data()
                .iter()
                .map(|&v| T::of(v as f64 / 255.0))
                .collect(),
        ),
    }
}
