//! Minimal float RGB raster used throughout the pipeline.
//!
//! Values live in `[0, 1]`, stored row-major with interleaved channels.
//! PNG I/O goes through the `image` crate as 8-bit RGB.

use std::path::Path;

use crate::error::{Error, IoContext, Result};

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&color);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "raster of {}x{} needs {} values, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Copies `src` into this image with its top-left corner at `(y0, x0)`.
    pub fn blit(&mut self, src: &Image, y0: usize, x0: usize) {
        for y in 0..src.height {
            let d = ((y0 + y) * self.width + x0) * 3;
            let s = y * src.width * 3;
            self.data[d..d + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Image {
        let mut out = Image::filled(height, width, [0.0; 3]);
        for y in 0..height {
            let s = ((y0 + y) * self.width + x0) * 3;
            out.data[y * width * 3..(y + 1) * width * 3]
                .copy_from_slice(&self.data[s..s + width * 3]);
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_raw(
            height,
            width,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::decode_png(&bytes).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn decode_png(bytes: &[u8]) -> std::result::Result<Self, image::ImageError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self::from_rgb8(h as usize, w as usize, img.as_raw()).expect("decoded buffer is consistent"))
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Palette entries are defined in 8-bit units so that a PNG roundtrip is exact.
pub const fn rgb8(r: u8, g: u8, b: u8) -> Rgb {
    [r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0]
}

pub fn color_distance(a: Rgb, b: Rgb) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn luminance(c: Rgb) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_for_palette_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(8, 6, rgb8(128, 128, 128));
        img.set(3, 2, rgb8(250, 215, 20));
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn blit_and_crop_are_inverse() {
        let mut src = Image::filled(4, 4, [0.0; 3]);
        src.set(1, 2, [1.0, 0.5, 0.25]);
        let mut canvas = Image::filled(8, 8, [0.2; 3]);
        canvas.blit(&src, 4, 4);
        assert_eq!(canvas.crop(4, 4, 4, 4), src);
    }
}
