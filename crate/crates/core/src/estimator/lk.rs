//! Inverse-compositional Lucas-Kanade over an 8-parameter homography.

use nalgebra::{Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homography::Homography;
use crate::imaging::{downsample2, sample_bilinear, to_grayscale, ImageBuf};

type Mat8 = SMatrix<f64, 8, 8>;
type Vec8 = SVector<f64, 8>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LkConfig {
    pub levels: usize,
    pub max_iters: usize,
    /// Stop once the parameter update norm falls below this.
    pub eps: f64,
    /// Relative diagonal loading used when the Hessian is singular.
    pub damping: f64,
    /// Huber threshold on the intensity residual; `0` disables reweighting.
    pub huber: f64,
    /// Coarsest level keeps at least this many pixels per side.
    pub min_side: usize,
    /// Exhaustive integer-shift search radius at the coarsest level before
    /// the first Gauss-Newton step; `0` disables it.
    pub search_radius: usize,
}

impl Default for LkConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            max_iters: 40,
            eps: 1e-6,
            damping: 1e-3,
            huber: 0.05,
            min_side: 16,
            search_radius: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LkResult {
    /// Target-to-source estimate.
    pub h_ts: Homography,
    pub converged: bool,
    pub singular_hessian: bool,
    pub iterations: usize,
    /// Root-mean-square residual at the finest level.
    pub rms: f64,
}

// Level-l pixel to normalized coordinates: x_0 = 2^l x_l + (2^l - 1)/2,
// then centered and scaled by half the longer side.
fn level_to_norm(w0: usize, h0: usize, level: usize) -> Matrix3<f64> {
    let f = (1u64 << level) as f64;
    let up = Matrix3::new(f, 0.0, (f - 1.0) / 2.0, 0.0, f, (f - 1.0) / 2.0, 0.0, 0.0, 1.0);
    let s = w0.max(h0) as f64 / 2.0;
    let (cx, cy) = ((w0 as f64 - 1.0) / 2.0, (h0 as f64 - 1.0) / 2.0);
    let n = Matrix3::new(1.0 / s, 0.0, -cx / s, 0.0, 1.0 / s, -cy / s, 0.0, 0.0, 1.0);
    n * up
}

fn param_matrix(p: &Vec8) -> Matrix3<f64> {
    Matrix3::new(
        1.0 + p[0],
        p[1],
        p[2],
        p[3],
        1.0 + p[4],
        p[5],
        p[6],
        p[7],
        1.0,
    )
}

struct Level {
    template: ImageBuf,
    image: ImageBuf,
    to_norm: Matrix3<f64>,
    from_norm: Matrix3<f64>,
    // Per-pixel steepest-descent rows; `None` on the one-pixel border.
    sd: Vec<Option<Vec8>>,
}

fn build_level(template: ImageBuf, image: ImageBuf, w0: usize, h0: usize, l: usize) -> Level {
    let to_norm = level_to_norm(w0, h0, l);
    let from_norm = to_norm.try_inverse().expect("affine scaling is invertible");
    let (w, h) = template.dims();
    let scale = (w0.max(h0) as f64 / 2.0) / (1u64 << l) as f64;
    let mut sd = vec![None; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = (template.get(x + 1, y, 0) - template.get(x - 1, y, 0)) as f64 * 0.5 * scale;
            let gy = (template.get(x, y + 1, 0) - template.get(x, y - 1, 0)) as f64 * 0.5 * scale;
            let q = to_norm * nalgebra::Vector3::new(x as f64, y as f64, 1.0);
            let (u, v) = (q[0], q[1]);
            sd[y * w + x] = Some(Vec8::from_column_slice(&[
                gx * u,
                gx * v,
                gx,
                gy * u,
                gy * v,
                gy,
                -gx * u * u - gy * u * v,
                -gx * u * v - gy * v * v,
            ]));
        }
    }
    Level {
        template,
        image,
        to_norm,
        from_norm,
        sd,
    }
}

fn pyramid(i_s: &ImageBuf, i_t: &ImageBuf, cfg: &LkConfig) -> Vec<Level> {
    let (w0, h0) = i_s.dims();
    let mut t = to_grayscale(i_s);
    let mut im = to_grayscale(i_t);
    let mut levels = Vec::new();
    for l in 0..cfg.levels.max(1) {
        if l > 0 {
            if t.width / 2 < cfg.min_side || t.height / 2 < cfg.min_side {
                break;
            }
            t = downsample2(&t);
            im = downsample2(&im);
        }
        levels.push((t.clone(), im.clone()));
    }
    levels
        .into_iter()
        .enumerate()
        .map(|(l, (t, im))| build_level(t, im, w0, h0, l))
        .collect()
}

// Mean squared residual of `g` at `level` and the fraction of pixels it covers.
fn ssd(level: &Level, g: &Matrix3<f64>) -> (f64, f64) {
    let g_px = level.from_norm * g * level.to_norm;
    let (w, h) = level.template.dims();
    let mut px = [0.0f32];
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            let q = g_px * nalgebra::Vector3::new(x as f64, y as f64, 1.0);
            if q[2].abs() < 1e-12 {
                continue;
            }
            if sample_bilinear(&level.image, q[0] / q[2], q[1] / q[2], &mut px) < 0.999 {
                continue;
            }
            let e = (px[0] - level.template.get(x, y, 0)) as f64;
            sum += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return (f64::INFINITY, 0.0);
    }
    (sum / n as f64, n as f64 / (w * h) as f64)
}

// Best integer pre-shift (in level pixels) of `g` on the target side.
fn shift_search(level: &Level, g: &Matrix3<f64>, radius: usize) -> Matrix3<f64> {
    let r = radius as i64;
    let mut best = (ssd(level, g).0, *g);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx == 0 && dy == 0 {
                continue;
            }
            let t_px = Matrix3::new(1.0, 0.0, dx as f64, 0.0, 1.0, dy as f64, 0.0, 0.0, 1.0);
            let cand = level.to_norm * t_px * level.from_norm * g;
            let (e, cover) = ssd(level, &cand);
            if cover >= 0.5 && e < best.0 {
                best = (e, cand);
            }
        }
    }
    best.1
}

struct Step {
    delta: Option<Vec8>,
    singular: bool,
    sq_err: f64,
    n: usize,
}

// One Gauss-Newton step at `level` with warp `g` (normalized source->target).
fn step(level: &Level, g: &Matrix3<f64>, cfg: &LkConfig) -> Step {
    let g_px = level.from_norm * g * level.to_norm;
    let (w, h) = level.template.dims();
    let mut hess = Mat8::zeros();
    let mut b = Vec8::zeros();
    let mut sq_err = 0.0;
    let mut n = 0usize;
    let mut px = [0.0f32];
    for y in 0..h {
        for x in 0..w {
            let Some(sd) = &level.sd[y * w + x] else {
                continue;
            };
            let q = g_px * nalgebra::Vector3::new(x as f64, y as f64, 1.0);
            if q[2].abs() < 1e-12 {
                continue;
            }
            let cov = sample_bilinear(&level.image, q[0] / q[2], q[1] / q[2], &mut px);
            if cov < 0.999 {
                continue;
            }
            let e = (px[0] - level.template.get(x, y, 0)) as f64;
            let wt = if cfg.huber > 0.0 && e.abs() > cfg.huber {
                cfg.huber / e.abs()
            } else {
                1.0
            };
            hess += wt * sd * sd.transpose();
            b += wt * e * sd;
            sq_err += e * e;
            n += 1;
        }
    }
    if n < 8 {
        return Step {
            delta: None,
            singular: true,
            sq_err,
            n,
        };
    }
    if let Some(ch) = hess.cholesky() {
        return Step {
            delta: Some(ch.solve(&b)),
            singular: false,
            sq_err,
            n,
        };
    }
    let load = cfg.damping * (hess.trace() / 8.0).max(0.0);
    if load > 0.0 {
        let damped = hess + Mat8::identity() * load;
        if let Some(ch) = damped.cholesky() {
            return Step {
                delta: Some(ch.solve(&b)),
                singular: false,
                sq_err,
                n,
            };
        }
    }
    Step {
        delta: None,
        singular: true,
        sq_err,
        n,
    }
}

/// Aligns `i_t` to `i_s` and returns the target-to-source homography.
///
/// `init` is the starting target-to-source guess. A singular Hessian or an
/// exhausted iteration budget is reported through the flags; the last
/// iterate is returned either way.
pub fn lk_align(i_s: &ImageBuf, i_t: &ImageBuf, cfg: &LkConfig, init: &Homography) -> Result<LkResult> {
    i_s.same_shape(i_t)?;
    let (w0, h0) = i_s.dims();
    let levels = pyramid(i_s, i_t, cfg);
    let n0 = level_to_norm(w0, h0, 0);
    let n0_inv = n0.try_inverse().expect("affine scaling is invertible");
    let mut g = n0 * init.invert()?.matrix() * n0_inv;
    let mut converged = false;
    let mut singular = false;
    let mut iterations = 0;
    let mut rms = f64::NAN;
    if cfg.search_radius > 0 {
        if let Some(coarse) = levels.last() {
            g = shift_search(coarse, &g, cfg.search_radius);
        }
    }
    for level in levels.iter().rev() {
        converged = false;
        for _ in 0..cfg.max_iters {
            iterations += 1;
            let s = step(level, &g, cfg);
            rms = if s.n > 0 { (s.sq_err / s.n as f64).sqrt() } else { f64::NAN };
            let Some(dp) = s.delta else {
                singular |= s.singular;
                break;
            };
            if !dp.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("lucas-kanade update"));
            }
            let Some(dinv) = param_matrix(&dp).try_inverse() else {
                singular = true;
                break;
            };
            g = crate::homography::normalize(&(g * dinv));
            if dp.norm() < cfg.eps {
                converged = true;
                break;
            }
        }
        if singular {
            break;
        }
    }
    let g_px = n0_inv * g * n0;
    let h_st = Homography::from_matrix(g_px)?;
    Ok(LkResult {
        h_ts: h_st.invert()?,
        converged: converged && !singular,
        singular_hessian: singular,
        iterations,
        rms,
    })
}
