//! PNG decode and encode through the `image` crate.

use std::path::Path;

use far_core::image::{Image, Mask};
use image::{DynamicImage, ImageFormat};

use crate::error::{FarError, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(FarError::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| FarError::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| FarError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Decodes to 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::new(w as usize, h as usize, 3, img.into_raw())?)
}

/// Decodes keeping the channel count: grayscale stays single-channel, colour
/// becomes RGB so mask validation can reject it.
pub fn read_raw_mask(path: &Path) -> Result<Image> {
    let img = open(path)?;
    Ok(match img.color().channel_count() {
        1 | 2 => {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            Image::new(w as usize, h as usize, 1, g.into_raw())?
        }
        _ => {
            let c = img.to_rgb8();
            let (w, h) = c.dimensions();
            Image::new(w as usize, h as usize, 3, c.into_raw())?
        }
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        c => {
            return Err(far_core::Error::Shape(format!("cannot encode {c}-channel image")).into());
        }
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| FarError::io(dir, e))?;
    }
    image::save_buffer_with_format(path, &img.data, img.width as u32, img.height as u32, color, ImageFormat::Png).map_err(
        |e| FarError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    )
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_image(path, &mask.to_gray())
}
