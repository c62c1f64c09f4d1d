use super::{convolve_separable, downsample2, gaussian_blur, to_grayscale, ImageBuf, PlaneMask};
use crate::error::{Error, Result};

/// Multi-channel descriptor raster aligned with its source image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub const CHANNELS: usize = 5;

    /// Views the map as an image so it can go through [`super::warp`].
    pub(crate) fn to_planes(&self) -> Vec<ImageBuf> {
        (0..self.channels)
            .map(|c| {
                let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
                ImageBuf {
                    width: self.width,
                    height: self.height,
                    channels: 1,
                    data,
                    normalized: true,
                }
            })
            .collect()
    }

    pub(crate) fn from_planes(planes: &[ImageBuf]) -> Self {
        let (w, h) = planes[0].dims();
        let c = planes.len();
        let mut data = vec![0.0; w * h * c];
        for (k, p) in planes.iter().enumerate() {
            for (i, v) in p.data.iter().enumerate() {
                data[i * c + k] = *v;
            }
        }
        Self {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }
}

const SOBEL_SMOOTH: [f32; 3] = [1.0 / 4.0, 2.0 / 4.0, 1.0 / 4.0];
const SOBEL_DIFF: [f32; 3] = [-0.5, 0.0, 0.5];

fn sobel_abs(img: &ImageBuf) -> (ImageBuf, ImageBuf) {
    let gx = convolve_separable(img, &SOBEL_DIFF, &SOBEL_SMOOTH);
    let gy = convolve_separable(img, &SOBEL_SMOOTH, &SOBEL_DIFF);
    (gx.map(f32::abs), gy.map(f32::abs))
}

// Bilinear upsample of a half-resolution plane back to `w x h`, clamped.
fn upsample2(img: &ImageBuf, w: usize, h: usize) -> ImageBuf {
    ImageBuf::from_fn(w, h, |x, y| {
        let sx = ((x as f64 - 0.5) / 2.0).clamp(0.0, (img.width - 1) as f64);
        let sy = ((y as f64 - 0.5) / 2.0).clamp(0.0, (img.height - 1) as f64);
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(img.width - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let fx = (sx - x0 as f64) as f32;
        let fy = (sy - y0 as f64) as f32;
        let top = img.get(x0, y0, 0) * (1.0 - fx) + img.get(x1, y0, 0) * fx;
        let bot = img.get(x0, y1, 0) * (1.0 - fx) + img.get(x1, y1, 0) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Fixed handcrafted feature stack.
///
/// Channels: Gaussian-blurred intensity (sigma 1), then `|d/dx|` and `|d/dy|`
/// Sobel responses at full and half resolution, the latter upsampled back.
/// Color input is converted to luma first.
pub fn feature_extract(img: &ImageBuf) -> FeatureMap {
    let g = to_grayscale(img);
    let blurred = gaussian_blur(&g, 1.0);
    let (gx0, gy0) = sobel_abs(&g);
    let half = downsample2(&blurred);
    let (gx1, gy1) = sobel_abs(&half);
    let (w, h) = g.dims();
    FeatureMap::from_planes(&[blurred, gx0, gy0, upsample2(&gx1, w, h), upsample2(&gy1, w, h)])
}

/// Central-difference gradient magnitude of the luma channel.
pub fn gradient_magnitude(img: &ImageBuf) -> ImageBuf {
    let g = to_grayscale(img);
    ImageBuf::from_fn(g.width, g.height, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let dx = (g.get_clamped(x + 1, y, 0) - g.get_clamped(x - 1, y, 0)) * 0.5;
        let dy = (g.get_clamped(x, y + 1, 0) - g.get_clamped(x, y - 1, 0)) * 0.5;
        (dx * dx + dy * dy).sqrt()
    })
}

/// Band-weighted mean gradient magnitude.
pub fn seam_energy(img: &ImageBuf, band: &PlaneMask) -> Result<f64> {
    band.check_matches(img)?;
    let total = band.sum();
    if !(total > 0.0) {
        return Err(Error::EmptyBand);
    }
    let mag = gradient_magnitude(img);
    let acc: f64 = mag
        .data
        .iter()
        .zip(&band.weights)
        .map(|(&m, &w)| m as f64 * w as f64)
        .sum();
    Ok(acc / total)
}
