//! Separable Gaussian blur and bilinear resampling shared by preprocessing
//! and augmentation.

use crate::scalar::Scalar;

/// Normalized taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Half-sample symmetric reflection (`.. b a | a b ..`), periodic for
/// offsets larger than the signal.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m >= n {
        2 * n - 1 - m
    } else {
        m
    }
}

/// Blurs one `h x w` plane. Each source pixel spreads exactly its own mass,
/// so the plane mean is preserved.
pub fn blur_plane<T: Scalar>(plane: &[T], h: usize, w: usize, sigma: f64) -> Vec<T> {
    let taps: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::of).collect();
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &t) in taps.iter().enumerate() {
                acc += t * row[reflect(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp[reflect(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Bilinear sample with edge clamping; `(y, x)` in pixel-center coordinates.
pub(crate) fn sample_clamped<T: Scalar>(plane: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ay, ax) = (T::of(y - y0 as f64), T::of(x - x0 as f64));
    let one = T::one();
    let top = plane[y0 * w + x0] * (one - ax) + plane[y0 * w + x1] * ax;
    let bottom = plane[y1 * w + x0] * (one - ax) + plane[y1 * w + x1] * ax;
    top * (one - ay) + bottom * ay
}

/// Bilinear sample where positions outside the plane read as zero.
pub(crate) fn sample_zero<T: Scalar>(plane: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let (y0, x0) = (y.floor(), x.floor());
    let (ay, ax) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize].f64()
        }
    };
    let v = (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x0 + 1.0))
        + ay * ((1.0 - ax) * at(y0 + 1.0, x0) + ax * at(y0 + 1.0, x0 + 1.0));
    T::of(v)
}

/// Resamples a plane with half-pixel-center alignment.
pub fn resize_plane<T: Scalar>(
    plane: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    if (h, w) == (out_h, out_w) {
        return plane.to_vec();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            out.push(sample_clamped(plane, h, w, src_y, src_x));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_with_expected_radius() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(0.4).len(), 5);
    }

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let n = 3;
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, n)).collect();
        assert_eq!(got, vec![2, 2, 1, 0, 0, 1, 2, 2, 1, 0, 0, 1]);
    }

    #[test]
    fn blur_preserves_mass_even_with_huge_radius() {
        let plane: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64).collect();
        for sigma in [0.5, 1.0, 3.0, 25.0] {
            let out = blur_plane(&plane, 4, 5, sigma);
            let (a, b) = (plane.iter().sum::<f64>(), out.iter().sum::<f64>());
            assert!((a - b).abs() < 1e-9, "sigma {sigma}: {a} vs {b}");
        }
    }
}
