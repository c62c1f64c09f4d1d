//! Dominant-plane masks from the photometric residual of a plane-induced warp.
//!
//! This is a deterministic estimator: a pixel is assigned to the dominant
//! plane when the two views agree there after alignment by `h_ts`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::homography::Homography;
use crate::imaging::{abs_diff, box_filter, morph, to_grayscale, warp_same, ImageBuf, PlaneMask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneSegConfig {
    /// Smoothed residual below this is plane (intensities in `[0, 1]`).
    pub rho: f32,
    pub smooth_radius: usize,
    pub morph_radius: usize,
    pub feather_px: usize,
}

impl Default for PlaneSegConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            smooth_radius: 3,
            morph_radius: 2,
            feather_px: 2,
        }
    }
}

/// Turns a per-pixel residual into a soft plane mask.
///
/// Pixels with `valid < 0.999` carry no evidence and are treated as zero
/// residual.
pub fn mask_from_residual(residual: &ImageBuf, valid: &PlaneMask, cfg: &PlaneSegConfig) -> PlaneMask {
    let mut r = residual.clone();
    for (v, ok) in r.data.iter_mut().zip(&valid.weights) {
        if *ok < 0.999 {
            *v = 0.0;
        }
    }
    let smooth = box_filter(&r, cfg.smooth_radius);
    let raw = PlaneMask {
        width: r.width,
        height: r.height,
        weights: smooth
            .data
            .iter()
            .map(|&v| if v < cfg.rho { 1.0 } else { 0.0 })
            .collect(),
    };
    let cleaned = morph::close(&morph::open(&raw, cfg.morph_radius), cfg.morph_radius);
    morph::feather(&cleaned, cfg.feather_px)
}

fn residual_after_alignment(fixed: &ImageBuf, moving: &ImageBuf, h: &Homography) -> Result<(ImageBuf, PlaneMask)> {
    let fixed = to_grayscale(fixed);
    let moving = to_grayscale(moving);
    let (aligned, valid) = warp_same(&moving, h)?;
    Ok((abs_diff(&aligned, &fixed)?, valid))
}

/// Estimates `(M_s, M_t)`.
///
/// `M_s` comes from `|W(I_t, H_ts) - I_s|`; `M_t` symmetrically from
/// `|W(I_s, H_ts^-1) - I_t|`.
pub fn estimate_masks(
    i_s: &ImageBuf,
    i_t: &ImageBuf,
    h_ts: &Homography,
    cfg: &PlaneSegConfig,
) -> Result<(PlaneMask, PlaneMask)> {
    i_s.same_shape(i_t)?;
    let (res_s, valid_s) = residual_after_alignment(i_s, i_t, h_ts)?;
    let (res_t, valid_t) = residual_after_alignment(i_t, i_s, &h_ts.invert()?)?;
    Ok((
        mask_from_residual(&res_s, &valid_s, cfg),
        mask_from_residual(&res_t, &valid_t, cfg),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texture(w: usize, h: usize) -> ImageBuf {
        ImageBuf::from_fn(w, h, |x, y| {
            let (x, y) = (x as f32, y as f32);
            0.5 + 0.2 * (x * 0.31).sin() * (y * 0.23).cos() + 0.15 * ((x + y) * 0.17).sin()
        })
    }

    #[test]
    fn planar_pair_is_all_plane() {
        let i_s = texture(64, 64);
        let h = Homography::translation(2.0, -1.0);
        let (i_t, _) = warp_same(&i_s, &h).unwrap();
        // I_t = W(I_s, H) so H_ts = H^-1.
        let (m_s, _) = estimate_masks(&i_s, &i_t, &h.invert().unwrap(), &PlaneSegConfig::default()).unwrap();
        assert!(m_s.mean() >= 0.99);
    }

    #[test]
    fn moving_object_is_excluded() {
        let spec = crate::pipeline::corpus::CorpusSpec {
            min_objects: 1,
            max_objects: 1,
            object_size: crate::homography::Interval::new(52.0, 60.0),
            ..Default::default()
        };
        for seed in 0..8 {
            let pair = crate::pipeline::corpus::synth_pair(&spec, 0, 500 + seed);
            let t = pair.truth.unwrap();
            let (m_s, _) = estimate_masks(&pair.source, &pair.target, &t.h_ts, &PlaneSegConfig::default()).unwrap();
            let truth = t.inconsistent_support(128, 128, false);
            // Feathering only softens the plane side, so the segmented region is where the weight is 0.
            let (mut inter, mut union) = (0usize, 0usize);
            for (m, g) in m_s.weights.iter().zip(&truth.weights) {
                let (a, b) = (*m == 0.0, *g > 0.5);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            let iou = inter as f64 / union as f64;
            assert!(iou >= 0.8, "seed {seed}: IoU {iou}");
        }
    }

    #[test]
    fn unrelated_noise_is_not_plane() {
        // |U - V| for independent uniforms has mean 1/3, far above the threshold.
        let noise = |k: u64| {
            ImageBuf::from_fn(64, 64, |x, y| {
                (crate::seed::mix64(k ^ ((y * 64 + x) as u64).wrapping_mul(0x9e37)) % 10_000) as f32 / 10_000.0
            })
        };
        let (m_s, m_t) = estimate_masks(&noise(1), &noise(2), &Homography::identity(), &PlaneSegConfig::default()).unwrap();
        assert!(m_s.mean() < 0.2, "{}", m_s.mean());
        assert!(m_t.mean() < 0.2, "{}", m_t.mean());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn monotone_in_residual(seed in 0u64..1000, bump in 0.0f32..0.2) {
            let w = 24;
            let base = ImageBuf::from_fn(w, w, |x, y| {
                (crate::seed::mix64(seed ^ (x * 131 + y) as u64) % 1000) as f32 / 1000.0 * 0.12
            });
            let bigger = ImageBuf::from_fn(w, w, |x, y| {
                base.get(x, y, 0) + if (x + y) % 3 == 0 { bump } else { 0.0 }
            });
            let valid = PlaneMask::ones(w, w);
            let cfg = PlaneSegConfig::default();
            let a = mask_from_residual(&base, &valid, &cfg);
            let b = mask_from_residual(&bigger, &valid, &cfg);
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!(y <= x);
                prop_assert!((0.0..=1.0).contains(y));
            }
        }
    }
}
