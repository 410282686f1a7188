//! PNG output of single images, sample grids and chain strips.

use std::path::Path;

use image::{ExtendedColorType, ImageEncoder};
use srddpm_core::data::denormalize;
use srddpm_core::diffusion::ImageTensor;

use crate::error::{AppError, AppResult};

/// White border between tiles.
pub const GUTTER: usize = 2;

/// Interleaved 8-bit pixels, grayscale or RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn from_image(img: &ImageTensor) -> Self {
        let s = img.shape();
        let mut pixels = vec![0u8; s.len()];
        for c in 0..s.channels {
            for (i, v) in img.channel(c).iter().enumerate() {
                pixels[i * s.channels + c] = denormalize(*v);
            }
        }
        Self {
            width: s.width,
            height: s.height,
            channels: s.channels,
            pixels,
        }
    }

    /// Images side by side with a white gutter between neighbours.
    pub fn strip(images: &[ImageTensor]) -> Self {
        let tiles: Vec<Raster> = images.iter().map(Raster::from_image).collect();
        let (h, c) = tiles.first().map_or((0, 1), |t| (t.height, t.channels));
        let width = tiles.iter().map(|t| t.width).sum::<usize>() + GUTTER * tiles.len().saturating_sub(1);
        let mut pixels = vec![255u8; width * h * c];
        let mut x0 = 0;
        for t in &tiles {
            for y in 0..h {
                let src = &t.pixels[y * t.width * c..(y + 1) * t.width * c];
                let dst = (y * width + x0) * c;
                pixels[dst..dst + src.len()].copy_from_slice(src);
            }
            x0 += t.width + GUTTER;
        }
        Self {
            width,
            height: h,
            channels: c,
            pixels,
        }
    }

    pub fn png_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let color = if self.channels == 3 {
            ExtendedColorType::Rgb8
        } else {
            ExtendedColorType::L8
        };
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.pixels, self.width as u32, self.height as u32, color)
            .expect("in-memory PNG encoding");
        out
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        std::fs::write(path, self.png_bytes()).map_err(|e| AppError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use srddpm_core::diffusion::Shape;

    #[test]
    fn strip_layout() {
        let a = ImageTensor::filled(Shape::new(1, 3, 4), -1.0);
        let r = Raster::strip(&[a.clone(), a.clone(), a]);
        assert_eq!((r.width, r.height), (3 * 4 + 2 * GUTTER, 3));
        assert_eq!(r.pixels[0], 0);
        assert_eq!(r.pixels[4], 255);
        assert_eq!(r.pixels[5], 255);
        assert_eq!(r.pixels[6], 0);
    }

    #[test]
    fn rgb_interleaving_and_clamping() {
        let data = vec![1.0, 2.0, -1.0, -3.0, 0.0, 0.0];
        let img = ImageTensor::new(Shape::new(3, 1, 2), data).unwrap();
        let r = Raster::from_image(&img);
        assert_eq!(r.pixels, vec![255, 0, 128, 255, 0, 128]);
        assert!(r.png_bytes().starts_with(b"\x89PNG"));
    }

    #[test]
    fn png_decodes_back() {
        let img = ImageTensor::new(Shape::new(1, 2, 2), vec![-1.0, 0.0, 0.5, 1.0]).unwrap();
        let r = Raster::from_image(&img);
        let back = image::load_from_memory(&r.png_bytes()).unwrap().into_luma8();
        assert_eq!(back.into_raw(), r.pixels);
    }
}
