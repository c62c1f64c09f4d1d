//! PNG and binary PGM/PPM input/output.
//!
//! Intensities are stored as 8 bits: `round_half_up(v * 255)` on the way
//! out, `v / 255` on the way in.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use super::{ImageBuf, PlaneMask};
use crate::error::{Error, Result};

pub fn to_u8(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

fn format_for(path: &Path) -> ImageFormat {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") | Some("ppm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    }
}

/// Loads PNG or PNM; alpha is dropped, 16-bit data is rescaled.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuf> {
    let path = path.as_ref();
    let dynimg = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let gray = matches!(
        dynimg,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_)
    );
    if gray {
        let data = dynimg.to_luma32f().into_raw();
        ImageBuf::from_vec(w, h, 1, data)
    } else {
        let data = dynimg.to_rgb32f().into_raw();
        ImageBuf::from_vec(w, h, 3, data)
    }
}

/// Writes an 8-bit PNG (or PGM/PPM when the extension says so).
pub fn save_image(img: &ImageBuf, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.normalized {
        return Err(Error::InvalidConfig(
            "normalized images have no [0,1] range and cannot be stored as 8-bit".into(),
        ));
    }
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynimg = if img.channels == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("buffer size checked"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("buffer size checked"))
    };
    dynimg
        .save_with_format(path, format_for(path))
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_mask(mask: &PlaneMask, path: impl AsRef<Path>) -> Result<()> {
    save_image(&mask.as_image(), path)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<PlaneMask> {
    let img = super::to_grayscale(&load_image(path)?);
    Ok(PlaneMask {
        width: img.width,
        height: img.height,
        weights: img.data,
    })
}
