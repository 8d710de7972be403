use alloc::vec;
use alloc::vec::Vec;

use crate::taxonomy::Rgb;

/// Row-major RGB image held in memory.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RgbRaster {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RasterError {
    #[error("raster dimensions must be at least 1x1, got {width}x{height}")]
    Empty { width: usize, height: usize },
    #[error("pixel buffer holds {actual} entries, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("region {x},{y} {width}x{height} exceeds raster {raster_width}x{raster_height}")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
        raster_width: usize,
        raster_height: usize,
    },
}

impl RgbRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Empty { width, height });
        }
        if pixels.len() != width * height {
            return Err(RasterError::BufferSize {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(RgbRaster {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, colour: Rgb) -> Result<Self, RasterError> {
        Self::new(width, height, vec![colour; width * height])
    }

    /// Builds a raster from interleaved `r g b` bytes.
    pub fn from_rgb_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self, RasterError> {
        if bytes.len() != width * height * 3 {
            return Err(RasterError::BufferSize {
                expected: width * height * 3,
                actual: bytes.len(),
            });
        }
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| Rgb([c[0], c[1], c[2]]))
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn to_rgb_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.0).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, colour: Rgb) {
        self.pixels[y * self.width + x] = colour;
    }

    /// Copies out the rectangle `[x, x+width) x [y, y+height)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self, RasterError> {
        if x + width > self.width || y + height > self.height {
            return Err(RasterError::OutOfBounds {
                x,
                y,
                width,
                height,
                raster_width: self.width,
                raster_height: self.height,
            });
        }
        let mut pixels = Vec::with_capacity(width * height);
        for row in y..y + height {
            let start = row * self.width + x;
            pixels.extend_from_slice(&self.pixels[start..start + width]);
        }
        Self::new(width, height, pixels)
    }

    /// Places `right` to the right of `self`. Heights must match.
    pub fn hconcat(&self, right: &RgbRaster) -> Option<RgbRaster> {
        if self.height != right.height {
            return None;
        }
        let width = self.width + right.width;
        let mut pixels = Vec::with_capacity(width * self.height);
        for y in 0..self.height {
            pixels.extend_from_slice(&self.pixels[y * self.width..(y + 1) * self.width]);
            pixels.extend_from_slice(&right.pixels[y * right.width..(y + 1) * right.width]);
        }
        RgbRaster::new(width, self.height, pixels).ok()
    }

    /// Rec. 601 luma per pixel.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|p| 0.299 * f64::from(p.r()) + 0.587 * f64::from(p.g()) + 0.114 * f64::from(p.b()))
            .collect()
    }
}
