//! Float rasters, backward warping and the small set of filters the
//! generator and refinement stages rely on.

mod features;
pub mod io;
pub mod morph;

pub use features::{feature_extract, gradient_magnitude, seam_energy, FeatureMap};

use crate::error::{Error, Result};
use crate::homography::Homography;

/// Dense float raster, row-major and channel-interleaved.
///
/// Values live in `[0, 1]` unless `normalized` is set, in which case the
/// buffer holds zero-mean/unit-variance intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub normalized: bool,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f32) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
            normalized: false,
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::DimensionMismatch(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "buffer of {} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            normalized: false,
        })
    }

    /// Single-channel image from a per-pixel function.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
            normalized: false,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Clamped read for filters.
    #[inline]
    pub(crate) fn get_clamped(&self, x: isize, y: isize, c: usize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y, c)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub(crate) fn same_shape(&self, other: &ImageBuf) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels {
            return Err(Error::DimensionMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }
}

/// Per-pixel weight in `[0, 1]`; 1 marks the dominant plane (or, for warp
/// validity, full source coverage).
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneMask {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f32>,
}

impl PlaneMask {
    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self {
            width,
            height,
            weights: vec![v; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::filled(width, height, 1.0)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut weights = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                weights.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            weights,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.weights[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.weights.is_empty() {
            0.0
        } else {
            self.sum() / self.weights.len() as f64
        }
    }

    /// `1 - w` per pixel.
    pub fn complement(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| 1.0 - w).collect(),
            ..self.clone()
        }
    }

    pub fn as_image(&self) -> ImageBuf {
        ImageBuf {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.weights.clone(),
            normalized: false,
        }
    }

    pub(crate) fn check_matches(&self, img: &ImageBuf) -> Result<()> {
        if self.width != img.width || self.height != img.height {
            return Err(Error::DimensionMismatch(format!(
                "mask {}x{} vs image {}x{}",
                self.width, self.height, img.width, img.height
            )));
        }
        Ok(())
    }
}

/// Bilinear read at `(x, y)` with zero fill outside the raster.
///
/// Writes the interpolated channels into `out` and returns the summed weight
/// of the taps that fell inside the source.
#[inline]
pub fn sample_bilinear(img: &ImageBuf, x: f64, y: f64, out: &mut [f32]) -> f32 {
    for o in out.iter_mut() {
        *o = 0.0;
    }
    if !(x.is_finite() && y.is_finite()) {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let x0 = x0 as i64;
    let y0 = y0 as i64;
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    let (w, h) = (img.width as i64, img.height as i64);
    let mut coverage = 0.0;
    for (tx, ty, wt) in taps {
        if wt == 0.0 || tx < 0 || ty < 0 || tx >= w || ty >= h {
            continue;
        }
        coverage += wt;
        let base = (ty as usize * img.width + tx as usize) * img.channels;
        for (c, o) in out.iter_mut().enumerate() {
            *o += wt * img.data[base + c];
        }
    }
    coverage
}

/// Backward warp: output pixel `p` reads the source at `h^-1 p`.
///
/// Returns the warped image (zero outside the source) and the per-pixel
/// coverage of in-bounds bilinear taps.
pub fn warp(img: &ImageBuf, h: &Homography, out_w: usize, out_h: usize) -> Result<(ImageBuf, PlaneMask)> {
    let inv = h.invert()?;
    let mut out = ImageBuf::new(out_w, out_h, img.channels);
    out.normalized = img.normalized;
    let mut valid = PlaneMask::zeros(out_w, out_h);
    let mut px = vec![0.0f32; img.channels];
    for y in 0..out_h {
        for x in 0..out_w {
            let Some((sx, sy)) = inv.apply(x as f64, y as f64) else {
                continue;
            };
            let cov = sample_bilinear(img, sx, sy, &mut px);
            let i = y * out_w + x;
            valid.weights[i] = cov;
            out.data[i * img.channels..(i + 1) * img.channels].copy_from_slice(&px);
        }
    }
    Ok((out, valid))
}

/// Warp into a raster of the same size as the input.
pub fn warp_same(img: &ImageBuf, h: &Homography) -> Result<(ImageBuf, PlaneMask)> {
    warp(img, h, img.width, img.height)
}

/// Warps a weight raster; zero outside the source.
pub fn warp_mask(mask: &PlaneMask, h: &Homography) -> Result<PlaneMask> {
    let (img, _) = warp_same(&mask.as_image(), h)?;
    Ok(PlaneMask {
        width: mask.width,
        height: mask.height,
        weights: img.data,
    })
}

/// Luma conversion with (0.299, 0.587, 0.114) weights.
pub fn to_grayscale(img: &ImageBuf) -> ImageBuf {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    ImageBuf {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
        normalized: img.normalized,
    }
}

/// Central `w x h` window; the offset rounds down when the margin is odd.
pub fn center_crop(img: &ImageBuf, w: usize, h: usize) -> Result<ImageBuf> {
    if w > img.width || h > img.height || w == 0 || h == 0 {
        return Err(Error::DimensionMismatch(format!(
            "cannot crop {w}x{h} from {}x{}",
            img.width, img.height
        )));
    }
    let (ox, oy) = crop_origin(img.width, img.height, w, h);
    let mut out = ImageBuf::new(w, h, img.channels);
    out.normalized = img.normalized;
    let c = img.channels;
    for y in 0..h {
        let src = ((y + oy) * img.width + ox) * c;
        out.data[y * w * c..(y + 1) * w * c].copy_from_slice(&img.data[src..src + w * c]);
    }
    Ok(out)
}

pub fn crop_origin(width: usize, height: usize, w: usize, h: usize) -> (usize, usize) {
    ((width - w) / 2, (height - h) / 2)
}

/// Guard added to the standard deviation in [`normalize_intensity`].
pub const NORMALIZE_EPS: f64 = 1e-6;

/// Zero-mean, unit-std rescaling over all pixels and channels.
pub fn normalize_intensity(img: &ImageBuf) -> ImageBuf {
    let n = img.data.len().max(1) as f64;
    let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + NORMALIZE_EPS;
    let mut out = img.map(|v| ((v as f64 - mean) / denom) as f32);
    out.normalized = true;
    out
}

/// Area-averaging downsample to `out_w x out_h`.
pub fn resize_area(img: &ImageBuf, out_w: usize, out_h: usize) -> ImageBuf {
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let c = img.channels;
    let mut out = ImageBuf::new(out_w, out_h, c);
    out.normalized = img.normalized;
    for oy in 0..out_h {
        let y0 = oy as f64 * sy;
        let y1 = y0 + sy;
        for ox in 0..out_w {
            let x0 = ox as f64 * sx;
            let x1 = x0 + sx;
            let mut acc = vec![0.0f64; c];
            let mut total = 0.0;
            let mut yy = y0.floor() as usize;
            while (yy as f64) < y1 && yy < img.height {
                let wy = (y1.min(yy as f64 + 1.0) - y0.max(yy as f64)).max(0.0);
                let mut xx = x0.floor() as usize;
                while (xx as f64) < x1 && xx < img.width {
                    let wx = (x1.min(xx as f64 + 1.0) - x0.max(xx as f64)).max(0.0);
                    let wt = wx * wy;
                    if wt > 0.0 {
                        for (k, a) in acc.iter_mut().enumerate() {
                            *a += wt * img.get(xx, yy, k) as f64;
                        }
                        total += wt;
                    }
                    xx += 1;
                }
                yy += 1;
            }
            for (k, a) in acc.iter().enumerate() {
                out.set(ox, oy, k, (a / total.max(1e-12)) as f32);
            }
        }
    }
    out
}

/// 2x2 box downsample (odd trailing row/column dropped).
pub fn downsample2(img: &ImageBuf) -> ImageBuf {
    let w = (img.width / 2).max(1);
    let h = (img.height / 2).max(1);
    resize_area(
        &center_crop(img, (w * 2).min(img.width), (h * 2).min(img.height)).unwrap_or_else(|_| img.clone()),
        w,
        h,
    )
}

/// Separable convolution with a symmetric kernel, clamped borders.
pub(crate) fn convolve_separable(img: &ImageBuf, kx: &[f32], ky: &[f32]) -> ImageBuf {
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let c = img.channels;
    let mut tmp = ImageBuf::new(img.width, img.height, c);
    for y in 0..img.height {
        for x in 0..img.width {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, &k) in kx.iter().enumerate() {
                    acc += k * img.get_clamped(x as isize + i as isize - rx, y as isize, ch);
                }
                tmp.set(x, y, ch, acc);
            }
        }
    }
    let mut out = ImageBuf::new(img.width, img.height, c);
    out.normalized = img.normalized;
    for y in 0..img.height {
        for x in 0..img.width {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, &k) in ky.iter().enumerate() {
                    acc += k * tmp.get_clamped(x as isize, y as isize + i as isize - ry, ch);
                }
                out.set(x, y, ch, acc);
            }
        }
    }
    out
}

pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub fn gaussian_blur(img: &ImageBuf, sigma: f32) -> ImageBuf {
    let k = gaussian_kernel(sigma);
    convolve_separable(img, &k, &k)
}

/// Mean over a `(2r+1)^2` window, clamped at the borders.
pub fn box_filter(img: &ImageBuf, radius: usize) -> ImageBuf {
    let k = vec![1.0 / (2 * radius + 1) as f32; 2 * radius + 1];
    convolve_separable(img, &k, &k)
}

/// Per-pixel `|a - b|` averaged over channels.
pub fn abs_diff(a: &ImageBuf, b: &ImageBuf) -> Result<ImageBuf> {
    a.same_shape(b)?;
    let c = a.channels;
    let data = a
        .data
        .chunks_exact(c)
        .zip(b.data.chunks_exact(c))
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v).abs()).sum::<f32>() / c as f32)
        .collect();
    ImageBuf::from_vec(a.width, a.height, 1, data)
}
