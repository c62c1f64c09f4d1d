//! Binary morphology and feathering on [`PlaneMask`] rasters.
//!
//! Binary inputs are read as `weight > 0.5`. Structuring elements are
//! squares of the given radius; pixels outside the raster are ignored.

use super::PlaneMask;

fn binary(mask: &PlaneMask) -> Vec<bool> {
    mask.weights.iter().map(|&w| w > 0.5).collect()
}

fn to_mask(w: usize, h: usize, b: &[bool]) -> PlaneMask {
    PlaneMask {
        width: w,
        height: h,
        weights: b.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    }
}

// Separable square min/max filter.
fn rank_filter(w: usize, h: usize, src: &[bool], r: usize, want_any: bool) -> Vec<bool> {
    let mut tmp = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let row = &src[y * w + lo..=y * w + hi];
            tmp[y * w + x] = if want_any {
                row.iter().any(|&v| v)
            } else {
                row.iter().all(|&v| v)
            };
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut acc = !want_any;
            for yy in lo..=hi {
                let v = tmp[yy * w + x];
                if want_any && v {
                    acc = true;
                    break;
                }
                if !want_any && !v {
                    acc = false;
                    break;
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub fn dilate(mask: &PlaneMask, r: usize) -> PlaneMask {
    let b = rank_filter(mask.width, mask.height, &binary(mask), r, true);
    to_mask(mask.width, mask.height, &b)
}

pub fn erode(mask: &PlaneMask, r: usize) -> PlaneMask {
    let b = rank_filter(mask.width, mask.height, &binary(mask), r, false);
    to_mask(mask.width, mask.height, &b)
}

/// Erode then dilate: removes foreground specks narrower than `2r + 1`.
pub fn open(mask: &PlaneMask, r: usize) -> PlaneMask {
    dilate(&erode(mask, r), r)
}

/// Dilate then erode: fills background holes narrower than `2r + 1`.
pub fn close(mask: &PlaneMask, r: usize) -> PlaneMask {
    erode(&dilate(mask, r), r)
}

/// Linear ramp on the foreground side of each boundary.
///
/// A foreground pixel at Chebyshev distance `d` from the nearest background
/// pixel gets weight `min(1, d / (ramp + 1))`, so `ramp` pixels take
/// intermediate values. Background stays 0.
pub fn feather(mask: &PlaneMask, ramp: usize) -> PlaneMask {
    let (w, h) = mask.dims();
    let b = binary(mask);
    let reach = ramp as isize + 1;
    let mut out = PlaneMask::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !b[(y as usize) * w + x as usize] {
                continue;
            }
            let mut d = reach;
            'search: for r in 1..reach {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs() != r && dy.abs() != r {
                            continue;
                        }
                        let (xx, yy) = (x + dx, y + dy);
                        if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                            continue;
                        }
                        if !b[yy as usize * w + xx as usize] {
                            d = r;
                            break 'search;
                        }
                    }
                }
            }
            out.weights[y as usize * w + x as usize] = (d as f32 / reach as f32).min(1.0);
        }
    }
    out
}

/// Pixels within `r` of a change in the binarized mask, restricted to `within`.
pub fn boundary_band(mask: &PlaneMask, r: usize, within: Option<&PlaneMask>) -> PlaneMask {
    let fg = dilate(mask, 1);
    let core = erode(mask, 1);
    let edge = PlaneMask {
        weights: fg
            .weights
            .iter()
            .zip(&core.weights)
            .map(|(a, b)| if *a > 0.5 && *b < 0.5 { 1.0 } else { 0.0 })
            .collect(),
        ..fg.clone()
    };
    let mut band = dilate(&edge, r.saturating_sub(1));
    if let Some(m) = within {
        for (b, v) in band.weights.iter_mut().zip(&m.weights) {
            if *v < 0.5 {
                *b = 0.0;
            }
        }
    }
    band
}
