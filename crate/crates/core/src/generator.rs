//! Labeled-pair synthesis from an unlabeled pair.
//!
//! Given source `I_s`, target `I_t`, their dominant-plane masks and the
//! plane homography `H_ts` (target -> source), a new target `I'_t` is built
//! so that `H_gt` exactly aligns the dominant plane of `I_s` with `I'_t`,
//! while everything off the plane keeps the motion it had in `I_t`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homography::{max_corner_displacement, Frame, Homography, Interval, PerturbationRanges};
use crate::imaging::{abs_diff, morph, warp_mask, warp_same, ImageBuf, PlaneMask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Total warped weight below which a pixel is a hole.
    pub eps_w: f32,
    /// Mean source-mask weight below which the sample is flagged.
    pub empty_plane_floor: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            eps_w: 0.05,
            empty_plane_floor: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisturbanceConfig {
    pub ranges: PerturbationRanges,
    /// Redraw the disturbance while its largest corner shift is below this.
    pub min_corner_px: f64,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        Self {
            ranges: PerturbationRanges {
                translation: Interval::symmetric(8.0),
                rotation: Interval::symmetric(0.05),
                ..PerturbationRanges::neutral()
            },
            min_corner_px: 2.0,
        }
    }
}

/// Output of the two-homography fusion.
#[derive(Clone, Debug)]
pub struct Composite {
    pub image: ImageBuf,
    /// Warped source-plane weight `W(M_s, H_gt)`.
    pub plane_weight: PlaneMask,
    /// Warped non-plane weight `W(1 - M_t, H_gt H_ts)`.
    pub other_weight: PlaneMask,
    /// Coverage of `W(I_t, H_gt H_ts)`.
    pub fill_valid: PlaneMask,
    /// Fraction of pixels filled from the hole source.
    pub hole_fraction: f64,
    pub empty_dominant_plane: bool,
}

fn check_inputs(i_s: &ImageBuf, i_t: &ImageBuf, m_s: &PlaneMask, m_t: &PlaneMask) -> Result<()> {
    i_s.same_shape(i_t)?;
    m_s.check_matches(i_s)?;
    m_t.check_matches(i_t)
}

fn premultiply(img: &ImageBuf, mask: &PlaneMask) -> ImageBuf {
    let c = img.channels;
    let mut out = img.clone();
    for (i, px) in out.data.chunks_exact_mut(c).enumerate() {
        let w = mask.weights[i];
        px.iter_mut().for_each(|v| *v *= w);
    }
    out
}

/// Single-warp fusion `W(I_s M_s + I_t (1 - M_t), H_gt)`.
///
/// Kept as the baseline the two-homography fusion is measured against.
pub fn generate_naive(
    i_s: &ImageBuf,
    i_t: &ImageBuf,
    m_s: &PlaneMask,
    m_t: &PlaneMask,
    h_gt: &Homography,
) -> Result<ImageBuf> {
    check_inputs(i_s, i_t, m_s, m_t)?;
    let mut fused = premultiply(i_s, m_s);
    let rest = premultiply(i_t, &m_t.complement());
    for (a, b) in fused.data.iter_mut().zip(&rest.data) {
        *a += b;
    }
    Ok(warp_same(&fused, h_gt)?.0)
}

/// Two-homography fusion `W(I_s M_s, H_gt) + W(I_t (1 - M_t), H_gt H_ts)`.
///
/// The two warped layers are blended by their warped weights `a` and `b`.
/// Where `a + b < 1` the remainder comes from `R = W(I_t, H_gt H_ts)`
/// (coverage-normalized); pixels with `a + b < eps_w` take `R` outright.
pub fn generate_realistic(
    i_s: &ImageBuf,
    i_t: &ImageBuf,
    m_s: &PlaneMask,
    m_t: &PlaneMask,
    h_gt: &Homography,
    h_ts: &Homography,
    cfg: &GeneratorConfig,
) -> Result<Composite> {
    check_inputs(i_s, i_t, m_s, m_t)?;
    let h_other = h_gt.compose(h_ts);
    let not_t = m_t.complement();
    let (plane_px, _) = warp_same(&premultiply(i_s, m_s), h_gt)?;
    let plane_w = warp_mask(m_s, h_gt)?;
    let (other_px, _) = warp_same(&premultiply(i_t, &not_t), &h_other)?;
    let other_w = warp_mask(&not_t, &h_other)?;
    let (fill, fill_valid) = warp_same(i_t, &h_other)?;

    let c = i_s.channels;
    let mut out = ImageBuf::new(i_s.width, i_s.height, c);
    let mut holes = 0usize;
    for i in 0..i_s.width * i_s.height {
        let a = plane_w.weights[i];
        let b = other_w.weights[i];
        let v = fill_valid.weights[i];
        let px = &mut out.data[i * c..(i + 1) * c];
        if a + b < cfg.eps_w {
            holes += 1;
            for k in 0..c {
                px[k] = if v > 0.0 { fill.data[i * c + k] / v } else { 0.0 };
            }
            continue;
        }
        let f = (1.0 - a - b).max(0.0);
        let denom = a + b + f;
        for k in 0..c {
            let fill_k = if v > 0.0 { fill.data[i * c + k] / v } else { 0.0 };
            px[k] = (plane_px.data[i * c + k] + other_px.data[i * c + k] + f * fill_k) / denom;
        }
    }
    out.clamp01();
    Ok(Composite {
        image: out,
        hole_fraction: holes as f64 / (i_s.width * i_s.height) as f64,
        empty_dominant_plane: m_s.mean() < cfg.empty_plane_floor,
        plane_weight: plane_w,
        other_weight: other_w,
        fill_valid,
    })
}

/// Draws the disturbance `dH` applied to `H_ts`.
///
/// Redraws (up to 64 times) while the largest corner shift is below
/// `min_corner_px`; a degenerate range yields the identity.
pub fn sample_disturbance(cfg: &DisturbanceConfig, frame: Frame, seed: u64) -> Result<Homography> {
    cfg.ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dh = cfg.ranges.sample_with(frame, &mut rng);
    for _ in 0..64 {
        if max_corner_displacement(&dh, frame)? >= cfg.min_corner_px {
            break;
        }
        let next = cfg.ranges.sample_with(frame, &mut rng);
        if next == dh {
            break;
        }
        dh = next;
    }
    Ok(dh)
}

/// Builds an artifact-bearing negative `I_r` by fusing with `dH H_ts`
/// in place of `H_ts`. Returns the image and the disturbance used.
#[allow(clippy::too_many_arguments)]
pub fn make_disturbance(
    i_s: &ImageBuf,
    i_t: &ImageBuf,
    m_s: &PlaneMask,
    m_t: &PlaneMask,
    h_gt: &Homography,
    h_ts: &Homography,
    cfg: &GeneratorConfig,
    disturbance: &DisturbanceConfig,
    seed: u64,
) -> Result<(Composite, Homography)> {
    let frame = Frame::new(i_s.width as u32, i_s.height as u32);
    let dh = sample_disturbance(disturbance, frame, seed)?;
    let disturbed = dh.compose(h_ts);
    Ok((generate_realistic(i_s, i_t, m_s, m_t, h_gt, &disturbed, cfg)?, dh))
}

/// Where a training sample came from and what happened to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pair_id: u64,
    pub iteration: u32,
    pub seed: u64,
    pub h_ts_used: Homography,
    pub quality_score: Option<f64>,
    pub accepted: Option<bool>,
    pub empty_dominant_plane: bool,
}

/// `(I_s, I'_t, H_gt)` plus provenance.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub i_s: ImageBuf,
    pub i_t_prime: ImageBuf,
    pub h_gt: Homography,
    pub provenance: Provenance,
}

impl TrainingSample {
    pub fn frame(&self) -> Frame {
        Frame::new(self.i_s.width as u32, self.i_s.height as u32)
    }
}

/// Samples `H_gt` from `ranges` with `seed`, fuses, and records provenance.
#[allow(clippy::too_many_arguments)]
pub fn assemble_sample(
    pair_id: u64,
    iteration: u32,
    seed: u64,
    i_s: &ImageBuf,
    i_t: &ImageBuf,
    m_s: &PlaneMask,
    m_t: &PlaneMask,
    h_ts: &Homography,
    ranges: &PerturbationRanges,
    cfg: &GeneratorConfig,
) -> Result<(TrainingSample, Composite)> {
    let frame = Frame::new(i_s.width as u32, i_s.height as u32);
    let h_gt = crate::homography::sample_gt(ranges, frame, seed)?;
    let comp = generate_realistic(i_s, i_t, m_s, m_t, &h_gt, h_ts, cfg)?;
    if comp.empty_dominant_plane {
        log::warn!("pair {pair_id}: dominant plane covers under {:.0}% of the source", cfg.empty_plane_floor * 100.0);
    }
    let sample = TrainingSample {
        i_s: i_s.clone(),
        i_t_prime: comp.image.clone(),
        h_gt,
        provenance: Provenance {
            pair_id,
            iteration,
            seed,
            h_ts_used: *h_ts,
            quality_score: None,
            accepted: None,
            empty_dominant_plane: comp.empty_dominant_plane,
        },
    };
    Ok((sample, comp))
}

/// Mean `|W(I_s, H_gt) - I'_t|` over pixels where `plane_weight > 0.5`.
pub fn label_residual(i_s: &ImageBuf, i_t_prime: &ImageBuf, h_gt: &Homography, plane_weight: &PlaneMask) -> Result<f64> {
    let (aligned, _) = warp_same(i_s, h_gt)?;
    let diff = abs_diff(&aligned, i_t_prime)?;
    plane_weight.check_matches(&diff)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (d, w) in diff.data.iter().zip(&plane_weight.weights) {
        if *w > 0.5 {
            sum += *d as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyBand);
    }
    Ok(sum / n as f64)
}

/// Neighborhood of the fusion boundary: pixels within `radius` of a change
/// in the binarized warped plane weight, inside the region where every warp
/// involved is fully valid (eroded by `radius`).
pub fn fusion_band(comp: &Composite, plane_valid: &PlaneMask, radius: usize) -> PlaneMask {
    let mut both = plane_valid.clone();
    for (b, v) in both.weights.iter_mut().zip(&comp.fill_valid.weights) {
        *b = if *b > 0.999 && *v > 0.999 { 1.0 } else { 0.0 };
    }
    let interior = morph::erode(&both, radius);
    morph::boundary_band(&comp.plane_weight, radius, Some(&interior))
}
