//! Seeded image augmentation: blur, rotation, zoom and flips on `[C, H, W]`
//! tensors.
//!
//! Every random decision for a sample comes from a ChaCha stream selected by
//! `(policy.seed, stream_index)`, so the result depends only on its inputs
//! and not on the order in which samples are processed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::filter::{blur_plane, sample_clamped, sample_zero};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub p_blur: f64,
    pub p_rotate: f64,
    pub p_zoom: f64,
    pub p_flip_h: f64,
    pub p_flip_v: f64,
    pub rotate_max_deg: f64,
    pub zoom_range: (f64, f64),
    pub blur_sigma_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_blur: 0.5,
            p_rotate: 0.5,
            p_zoom: 0.5,
            p_flip_h: 0.5,
            p_flip_v: 0.5,
            rotate_max_deg: 15.0,
            zoom_range: (0.9, 1.1),
            blur_sigma_range: (0.5, 1.5),
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// A policy that never changes anything.
    pub fn identity() -> Self {
        AugmentPolicy {
            p_blur: 0.0,
            p_rotate: 0.0,
            p_zoom: 0.0,
            p_flip_h: 0.0,
            p_flip_v: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_blur", self.p_blur),
            ("p_rotate", self.p_rotate),
            ("p_zoom", self.p_zoom),
            ("p_flip_h", self.p_flip_h),
            ("p_flip_v", self.p_flip_v),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        let (zlo, zhi) = self.zoom_range;
        if !(zlo > 0.0 && zlo <= zhi) {
            return Err(Error::Config(format!("invalid zoom_range ({zlo}, {zhi})")));
        }
        let (blo, bhi) = self.blur_sigma_range;
        if !(blo > 0.0 && blo <= bhi) {
            return Err(Error::Config(format!(
                "invalid blur_sigma_range ({blo}, {bhi})"
            )));
        }
        if !(self.rotate_max_deg >= 0.0 && self.rotate_max_deg.is_finite()) {
            return Err(Error::Config(format!(
                "rotate_max_deg must be finite and >= 0, got {}",
                self.rotate_max_deg
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

/// The transforms chosen for one sample, with their parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentDraw {
    pub blur_sigma: Option<f64>,
    pub rotate_deg: Option<f64>,
    pub zoom_scale: Option<f64>,
    pub flip_h: bool,
    pub flip_v: bool,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Draws the decisions for `stream_index`. The stream always consumes the
/// same number of values, whatever is selected.
pub fn draw(policy: &AugmentPolicy, stream_index: u64) -> AugmentDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    rng.set_stream(stream_index);
    let pick = |p: f64, rng: &mut ChaCha8Rng| rng.gen::<f64>() < p;
    let blur = pick(policy.p_blur, &mut rng);
    let sigma = uniform(
        &mut rng,
        policy.blur_sigma_range.0,
        policy.blur_sigma_range.1,
    );
    let rotate = pick(policy.p_rotate, &mut rng);
    let angle = uniform(&mut rng, -policy.rotate_max_deg, policy.rotate_max_deg);
    let zoom = pick(policy.p_zoom, &mut rng);
    let scale = uniform(&mut rng, policy.zoom_range.0, policy.zoom_range.1);
    let flip_h = pick(policy.p_flip_h, &mut rng);
    let flip_v = pick(policy.p_flip_v, &mut rng);
    AugmentDraw {
        blur_sigma: blur.then_some(sigma),
        rotate_deg: rotate.then_some(angle),
        zoom_scale: zoom.then_some(scale),
        flip_h,
        flip_v,
    }
}

fn chw<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "expected [C, H, W]".into(),
        }),
    }
}

fn per_plane<T: Scalar>(
    t: &Tensor<T>,
    f: impl Fn(&[T], usize, usize) -> Vec<T>,
) -> Result<Tensor<T>> {
    let (c, h, w) = chw(t)?;
    let mut data = Vec::with_capacity(t.len());
    for ch in 0..c {
        data.extend(f(&t.data()[ch * h * w..(ch + 1) * h * w], h, w));
    }
    Tensor::new([c, h, w], data)
}

/// Separable Gaussian blur with symmetric reflection at the borders.
pub fn gaussian_blur<T: Scalar>(t: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be > 0, got {sigma}"
        )));
    }
    per_plane(t, |p, h, w| blur_plane(p, h, w, sigma))
}

/// Counter-clockwise rotation about the image center, bilinear, zero fill.
pub fn rotate<T: Scalar>(t: &Tensor<T>, degrees: f64) -> Result<Tensor<T>> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    per_plane(t, |p, h, w| {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            let dy = y as f64 - cy;
            for x in 0..w {
                let dx = x as f64 - cx;
                let sx = cx + cos * dx - sin * dy;
                let sy = cy + sin * dx + cos * dy;
                out.push(sample_zero(p, h, w, sy, sx));
            }
        }
        out
    })
}

/// Zoom about the center keeping the size: `scale > 1` crops the central
/// `1/scale` window and enlarges it, `scale < 1` shrinks the image inside a
/// zero border.
pub fn zoom<T: Scalar>(t: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "zoom scale must be > 0, got {scale}"
        )));
    }
    per_plane(t, |p, h, w| {
        let axis = |n: usize| {
            let c = (n as f64 - 1.0) / 2.0;
            // source window in pixel-center coordinates
            let half = if scale > 1.0 {
                ((n as f64 / scale - 1.0) / 2.0).max(0.0)
            } else {
                c
            };
            (c, c - half, c + half)
        };
        let (cy, ylo, yhi) = axis(h);
        let (cx, xlo, xhi) = axis(w);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = cy + (y as f64 - cy) / scale;
            for x in 0..w {
                let sx = cx + (x as f64 - cx) / scale;
                let outside = sy < -0.5 || sy > h as f64 - 0.5 || sx < -0.5 || sx > w as f64 - 0.5;
                out.push(if outside {
                    T::zero()
                } else {
                    sample_clamped(p, h, w, sy.clamp(ylo, yhi), sx.clamp(xlo, xhi))
                });
            }
        }
        out
    })
}

/// Exact index reversal along one spatial axis.
pub fn flip<T: Scalar>(t: &Tensor<T>, axis: FlipAxis) -> Result<Tensor<T>> {
    per_plane(t, |p, h, w| {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = match axis {
                    FlipAxis::Horizontal => (y, w - 1 - x),
                    FlipAxis::Vertical => (h - 1 - y, x),
                };
                out.push(p[sy * w + sx]);
            }
        }
        out
    })
}

/// Applies the transforms drawn for `stream_index` in the fixed order
/// blur, rotate, zoom, horizontal flip, vertical flip.
pub fn sample_augment<T: Scalar>(
    t: &Tensor<T>,
    policy: &AugmentPolicy,
    stream_index: u64,
) -> Result<Tensor<T>> {
    apply(t, &draw(policy, stream_index))
}

pub fn apply<T: Scalar>(t: &Tensor<T>, d: &AugmentDraw) -> Result<Tensor<T>> {
    chw(t)?;
    let mut out = t.clone();
    if let Some(sigma) = d.blur_sigma {
        out = gaussian_blur(&out, sigma)?;
    }
    if let Some(deg) = d.rotate_deg {
        out = rotate(&out, deg)?;
    }
    if let Some(s) = d.zoom_scale {
        out = zoom(&out, s)?;
    }
    if d.flip_h {
        out = flip(&out, FlipAxis::Horizontal)?;
    }
    if d.flip_v {
        out = flip(&out, FlipAxis::Vertical)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        let mut d = Vec::new();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    d.push(f(ch, y, x));
                }
            }
        }
        Tensor::new([c, h, w], d).unwrap()
    }

    fn textured() -> Tensor<f64> {
        img(2, 9, 9, |c, y, x| {
            ((c * 31 + y * 7 + x * 13) % 17) as f64 / 16.0
        })
    }

    #[test]
    fn blur_examples() {
        let c = img(1, 6, 7, |_, _, _| 0.25);
        let b = gaussian_blur(&c, 1.3).unwrap();
        assert!(b.max_abs_diff(&c) < 1e-15);

        let t = textured();
        let b = gaussian_blur(&t, 0.8).unwrap();
        let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.len() as f64;
        assert!((mean(&b) - mean(&t)).abs() < 1e-5);

        let imp = img(
            1,
            15,
            15,
            |_, y, x| if (y, x) == (7, 7) { 1.0 } else { 0.0 },
        );
        let b = gaussian_blur(&imp, 1.0).unwrap();
        assert!((b.data()[7 * 15 + 7] - 0.1592).abs() < 1e-3);
        assert!(gaussian_blur(&t, 0.0).is_err());
    }

    #[test]
    fn rotation_examples() {
        let t = textured();
        assert_eq!(rotate(&t, 0.0).unwrap(), t);
        assert!(rotate(&t, 360.0).unwrap().max_abs_diff(&t) < 1e-5);
        // exact counter-clockwise quarter turn: out[y][x] = in[x][n-1-y]
        let n = 9;
        let r = rotate(&t, 90.0).unwrap();
        let oracle = img(2, n, n, |c, y, x| t.data()[c * n * n + x * n + (n - 1 - y)]);
        assert!(r.max_abs_diff(&oracle) < 1e-5);
    }

    #[test]
    fn zoom_examples() {
        let t = textured();
        assert_eq!(zoom(&t, 1.0).unwrap(), t);
        let c = img(1, 8, 8, |_, _, _| 0.7);
        assert!(zoom(&c, 2.0).unwrap().max_abs_diff(&c) < 1e-15);
        assert!(zoom(&t, 0.0).is_err());

        // distinct quadrants: zooming by 2 only sees the central 2x2 block
        let q = img(1, 4, 4, |_, y, x| (1 + (y / 2) * 2 + x / 2) as f64);
        let z = zoom(&q, 2.0).unwrap();
        let central = [q.data()[5], q.data()[6], q.data()[9], q.data()[10]];
        // crop-then-resize oracle
        let crop: Vec<f64> = central.to_vec();
        let oracle = crate::preprocess::filter::resize_plane(&crop, 2, 2, 4, 4);
        for (a, b) in z.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let lo = central.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = central.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(z.data().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn shrink_pads_with_zeros() {
        let c = img(1, 10, 10, |_, _, _| 1.0);
        let z = zoom(&c, 0.5).unwrap();
        assert_eq!(z.data()[0], 0.0);
        assert!((z.data()[5 * 10 + 5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flip_examples() {
        let t = img(1, 2, 2, |_, y, x| (1 + y * 2 + x) as f64);
        let h = flip(&t, FlipAxis::Horizontal).unwrap();
        assert_eq!(h.data(), &[2.0, 1.0, 4.0, 3.0]);
        let v = flip(&t, FlipAxis::Vertical).unwrap();
        assert_eq!(v.data(), &[3.0, 4.0, 1.0, 2.0]);
        let tt = textured();
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            assert_eq!(flip(&flip(&tt, axis).unwrap(), axis).unwrap(), tt);
        }
        let sym = img(1, 3, 4, |_, y, x| (y + x.min(3 - x)) as f64);
        assert_eq!(flip(&sym, FlipAxis::Horizontal).unwrap(), sym);
    }

    #[test]
    fn policy_edge_cases() {
        let t = textured();
        let none = AugmentPolicy::identity();
        for i in 0..20 {
            assert_eq!(sample_augment(&t, &none, i).unwrap(), t);
        }
        let p = AugmentPolicy {
            seed: 9,
            ..Default::default()
        };
        let a = sample_augment(&t, &p, 77).unwrap();
        let b = sample_augment(&t, &p, 77).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let only_h = AugmentPolicy {
            p_flip_h: 1.0,
            ..AugmentPolicy::identity()
        };
        assert_eq!(
            sample_augment(&t, &only_h, 3).unwrap(),
            flip(&t, FlipAxis::Horizontal).unwrap()
        );
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut p = AugmentPolicy::default();
        assert!(p.validate().is_ok());
        p.p_zoom = 1.5;
        assert!(p.validate().is_err());
        let p = AugmentPolicy {
            zoom_range: (1.2, 1.0),
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = AugmentPolicy {
            blur_sigma_range: (0.0, 1.0),
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
