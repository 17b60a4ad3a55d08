//! Local-average subtraction ("Ben Graham" enhancement).

use serde::{Deserialize, Serialize};

use super::filter::blur_plane;
use super::ImageU8;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenGrahamParams {
    /// Blur scale in pixels; `None` uses `width / 30`.
    pub sigma: Option<f64>,
    /// Gain applied to the difference between the image and its blur.
    pub alpha: f64,
    /// Weight of the blurred image inside that difference.
    pub beta: f64,
    /// Output offset in intensity units.
    pub gamma: f64,
}

impl Default for BenGrahamParams {
    fn default() -> Self {
        BenGrahamParams {
            sigma: None,
            alpha: 4.0,
            beta: 1.0,
            gamma: 128.0,
        }
    }
}

impl BenGrahamParams {
    pub fn validate(&self) -> Result<()> {
        match self.sigma {
            Some(s) if !(s > 0.0 && s.is_finite()) => Err(Error::Config(format!(
                "Ben Graham sigma must be > 0, got {s}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn sigma_for(&self, width: usize) -> f64 {
        self.sigma.unwrap_or(width as f64 / 30.0)
    }
}

/// `clamp(alpha * (img - beta * blur(img)) + gamma)` per channel, rounded.
pub fn ben_graham(img: &ImageU8, p: &BenGrahamParams) -> Result<ImageU8> {
    p.validate()?;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let sigma = p.sigma_for(w);
    let mut out = vec![0u8; h * w * c];
    for ch in 0..c {
        let plane: Vec<f64> = img
            .data()
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|&v| v as f64)
            .collect();
        let blurred = blur_plane(&plane, h, w, sigma);
        for (i, (&v, &b)) in plane.iter().zip(&blurred).enumerate() {
            let o = p.alpha * (v - p.beta * b) + p.gamma;
            out[i * c + ch] = o.round().clamp(0.0, 255.0) as u8;
        }
    }
    ImageU8::new(h, w, c, out)
}
