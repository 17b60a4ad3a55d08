//! Contrast-limited adaptive histogram equalization.

use serde::{Deserialize, Serialize};

use super::ImageU8;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Bin ceiling as a multiple of the uniform bin height
    /// `tile_pixels / bins`. `f64::INFINITY` disables clipping.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 2.0,
            bins: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::Config(
                "CLAHE needs at least one tile per axis".into(),
            ));
        }
        if !(self.clip_limit >= 1.0) {
            return Err(Error::Config(format!(
                "CLAHE clip_limit must be >= 1, got {}",
                self.clip_limit
            )));
        }
        if !(1..=256).contains(&self.bins) {
            return Err(Error::Config(format!(
                "CLAHE bins must be in 1..=256, got {}",
                self.bins
            )));
        }
        Ok(())
    }
}

/// Pixel span `[start, end)` of each tile along one axis; the last tile
/// absorbs the remainder.
pub fn tile_bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    let step = len / tiles;
    (0..tiles)
        .map(|i| {
            let end = if i + 1 == tiles { len } else { (i + 1) * step };
            (i * step, end)
        })
        .collect()
}

fn bin_of(v: u8, bins: usize) -> usize {
    v as usize * bins / 256
}

/// Caps every bin at `limit` and spreads the removed mass evenly over the
/// bins still below the cap, repeating until nothing is left over or every
/// bin is full. Total mass is preserved when `limit * bins >= total`.
pub fn clip_histogram(hist: &mut [f64], limit: f64) {
    if !limit.is_finite() {
        return;
    }
    let total: f64 = hist.iter().sum();
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    while excess > total * 1e-12 {
        let open: Vec<usize> = (0..hist.len()).filter(|&i| hist[i] < limit).collect();
        if open.is_empty() {
            break;
        }
        let share = excess / open.len() as f64;
        excess = 0.0;
        for i in open {
            let room = limit - hist[i];
            if share >= room {
                hist[i] = limit;
                excess += share - room;
            } else {
                hist[i] += share;
            }
        }
    }
}

/// Histograms of every tile, row-major over the tile grid, clipped per `p`.
pub fn tile_histograms(img: &ImageU8, p: &ClaheParams) -> Result<Vec<Vec<f64>>> {
    check_input(img, p)?;
    let w = img.width();
    let mut out = Vec::with_capacity(p.tiles_x * p.tiles_y);
    for &(y0, y1) in &tile_bounds(img.height(), p.tiles_y) {
        for &(x0, x1) in &tile_bounds(w, p.tiles_x) {
            let mut hist = vec![0.0; p.bins];
            for y in y0..y1 {
                for &v in &img.data()[y * w + x0..y * w + x1] {
                    hist[bin_of(v, p.bins)] += 1.0;
                }
            }
            let pixels = ((y1 - y0) * (x1 - x0)) as f64;
            clip_histogram(&mut hist, p.clip_limit * pixels / p.bins as f64);
            out.push(hist);
        }
    }
    Ok(out)
}

fn check_input(img: &ImageU8, p: &ClaheParams) -> Result<()> {
    p.validate()?;
    if img.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "CLAHE expects a single-channel image, got {} channels",
            img.channels()
        )));
    }
    if p.tiles_x > img.width() || p.tiles_y > img.height() {
        return Err(Error::InvalidArgument(format!(
            "{}x{} tiles exceed {}x{} image",
            p.tiles_x,
            p.tiles_y,
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Mid-rank equalization: value `v` maps to `255 * (mass below v + half the
/// mass at v) / total`.
fn mapping(hist: &[f64]) -> [u8; 256] {
    let bins = hist.len();
    let total: f64 = hist.iter().sum();
    let mut per_bin = vec![0u8; bins];
    let mut below = 0.0;
    for (b, &h) in hist.iter().enumerate() {
        let level = 255.0 * (below + h / 2.0) / total;
        per_bin[b] = level.round().clamp(0.0, 255.0) as u8;
        below += h;
    }
    let mut lut = [0u8; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        *slot = per_bin[bin_of(v as u8, bins)];
    }
    lut
}

/// Interpolation anchors along one axis: for every pixel, the two
/// neighbouring tiles and the weight of the second one.
fn anchors(bounds: &[(usize, usize)], len: usize) -> Vec<(usize, usize, f64)> {
    let centers: Vec<f64> = bounds
        .iter()
        .map(|&(a, b)| a as f64 + (b - a - 1) as f64 / 2.0)
        .collect();
    let last = centers.len() - 1;
    (0..len)
        .map(|p| {
            let x = p as f64;
            if x <= centers[0] {
                return (0, 0, 0.0);
            }
            if x >= centers[last] {
                return (last, last, 0.0);
            }
            let i = centers.iter().rposition(|&c| c <= x).unwrap();
            (i, i + 1, (x - centers[i]) / (centers[i + 1] - centers[i]))
        })
        .collect()
}

/// Equalizes each tile with a clipped histogram and blends the four nearest
/// tile mappings bilinearly; border pixels use the nearest tiles only.
pub fn clahe(img: &ImageU8, p: &ClaheParams) -> Result<ImageU8> {
    let hists = tile_histograms(img, p)?;
    let luts: Vec<[u8; 256]> = hists.iter().map(|h| mapping(h)).collect();
    let (h, w) = (img.height(), img.width());
    let ys = anchors(&tile_bounds(h, p.tiles_y), h);
    let xs = anchors(&tile_bounds(w, p.tiles_x), w);
    let lut = |ty: usize, tx: usize, v: u8| luts[ty * p.tiles_x + tx][v as usize] as f64;
    let mut out = Vec::with_capacity(h * w);
    for (y, &(ty0, ty1, ay)) in ys.iter().enumerate() {
        for (x, &(tx0, tx1, ax)) in xs.iter().enumerate() {
            let v = img.data()[y * w + x];
            let top = (1.0 - ax) * lut(ty0, tx0, v) + ax * lut(ty0, tx1, v);
            let bottom = (1.0 - ax) * lut(ty1, tx0, v) + ax * lut(ty1, tx1, v);
            let blended = (1.0 - ay) * top + ay * bottom;
            out.push(blended.round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageU8::gray(h, w, out)
}
