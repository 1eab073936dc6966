//! Minimal raster types: 8-bit images and binary masks, with the resampling
//! the pipeline needs (center crop, bilinear, nearest, block pooling).

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Interleaved 8-bit raster, row-major, `channels` values per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(alloc::format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, pixel: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&pixel);
        }
        Image {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Largest centered square.
    pub fn center_crop_square(&self) -> Image {
        let side = self.width.min(self.height);
        let x0 = (self.width - side) / 2;
        let y0 = (self.height - side) / 2;
        self.crop(x0, y0, side, side)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
        }
        Image {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }

    /// Bilinear resample with half-pixel centers.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let c = self.channels;
        let mut data = vec![0u8; width * height * c];
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for ch in 0..c {
                    let p = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * c + ch] as f32;
                    let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
                    let bot = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
                    let v = top * (1.0 - wy) + bot * wy;
                    data[(y * width + x) * c + ch] = (v + 0.5).clamp(0.0, 255.0) as u8;
                }
            }
        }
        Image {
            width,
            height,
            channels: c,
            data,
        }
    }
}

/// Binary mask, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    /// Builds a mask from arbitrary bytes, treating nonzero as set.
    pub fn from_bits(width: usize, height: usize, bits: &[u8]) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(alloc::format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            data: bits.iter().map(|&b| u8::from(b != 0)).collect(),
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Tight bounding box `(x0, y0, w, h)` of set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Mask {
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = y * self.width + x0;
            data.extend_from_slice(&self.data[row..row + w]);
        }
        Mask {
            width: w,
            height: h,
            data,
        }
    }

    pub fn center_crop_square(&self) -> Mask {
        let side = self.width.min(self.height);
        self.crop((self.width - side) / 2, (self.height - side) / 2, side, side)
    }

    /// Nearest-neighbour resample; keeps the mask binary.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut data = vec![0u8; width * height];
        for y in 0..height {
            let sy = ((y * 2 + 1) * self.height / (height * 2)).min(self.height - 1);
            for x in 0..width {
                let sx = ((x * 2 + 1) * self.width / (width * 2)).min(self.width - 1);
                data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        Mask {
            width,
            height,
            data,
        }
    }

    /// Scales to 0/255 for storage as an 8-bit single-channel image.
    pub fn to_gray(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_of_block() {
        let mut m = Mask::zeros(8, 8);
        for y in 2..5 {
            for x in 3..7 {
                m.set(x, y, true);
            }
        }
        assert_eq!(m.bbox(), Some((3, 2, 4, 3)));
        assert_eq!(Mask::zeros(3, 3).bbox(), None);
    }

    #[test]
    fn nearest_resize_stays_binary_and_scales_blocks() {
        let mut m = Mask::zeros(4, 4);
        m.set(0, 0, true);
        let big = m.resize_nearest(8, 8);
        assert_eq!(big.count(), 4);
        assert!(big.data.iter().all(|&v| v <= 1));
    }

    #[test]
    fn bilinear_constant_image_is_constant() {
        let img = Image::filled(5, 7, [10, 20, 30]);
        let r = img.resize_bilinear(13, 3);
        assert!(r.data.chunks(3).all(|p| p == [10, 20, 30]));
    }

    #[test]
    fn center_crop_takes_middle() {
        let img = Image::new(4, 2, 1, alloc::vec![0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let c = img.center_crop_square();
        assert_eq!(c.data, alloc::vec![1, 2, 5, 6]);
    }
}
