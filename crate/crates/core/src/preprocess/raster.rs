use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An 8-bit raster, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

/// Luminance weights for RGB to gray conversion.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl ImageU8 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "zero-sized image {height}x{width}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(ImageU8 {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Single-channel copy; RGB is weighted 0.299/0.587/0.114.
    pub fn to_gray(&self) -> ImageU8 {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(3)
            .map(|px| {
                let l: f64 = px.iter().zip(LUMA).map(|(&v, w)| v as f64 * w).sum();
                l.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        ImageU8 {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Gray replicated into three channels.
    pub fn to_rgb(&self) -> ImageU8 {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageU8 {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    /// Reads PNG or BMP. Grayscale (with or without alpha) stays single
    /// channel, everything else becomes RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |reason: String| Error::Image {
            path: path.to_path_buf(),
            reason,
        };
        let img = image::open(path).map_err(|e| err(e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let is_gray = matches!(
            img.color(),
            image::ColorType::L8
                | image::ColorType::L16
                | image::ColorType::La8
                | image::ColorType::La16
        );
        if is_gray {
            ImageU8::new(h, w, 1, img.into_luma8().into_raw())
        } else {
            ImageU8::new(h, w, 3, img.into_rgb8().into_raw())
        }
        .map_err(|e| err(e.to_string()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
