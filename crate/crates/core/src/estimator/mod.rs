//! Homography estimators and the supervised objective.

pub mod lk;
pub mod regressor;

use serde::{Deserialize, Serialize};

pub use lk::{lk_align, LkConfig, LkResult};
pub use regressor::{train_regressor, Example, LossCurve, RegressorModel, RegressorSpec, TrainConfig};

use crate::error::{Error, Result};
use crate::homography::{homography_to_offsets, offsets_to_homography, CornerOffsets, Homography};
use crate::imaging::ImageBuf;

/// Mean over the four corners of the per-corner L1 distance.
fn corner_l1(a: &[f64; 8], b: &[f64; 8]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0
}

/// Bidirectional corner loss on raw offset arrays, with its gradient with
/// respect to both predictions.
pub fn sup_loss_grad(
    fwd: &[f64; 8],
    bwd: &[f64; 8],
    target_fwd: &[f64; 8],
    target_bwd: &[f64; 8],
) -> (f64, [f64; 8], [f64; 8]) {
    let mut gf = [0.0; 8];
    let mut gb = [0.0; 8];
    for k in 0..8 {
        gf[k] = sign(fwd[k] - target_fwd[k]) / 4.0;
        gb[k] = sign(bwd[k] - target_bwd[k]) / 4.0;
    }
    (corner_l1(fwd, target_fwd) + corner_l1(bwd, target_bwd), gf, gb)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `|D_fwd - D(H_gt)| + |D_bwd - D(H_gt^-1)|`, each term a mean over the
/// four corners of the per-corner L1 distance.
pub fn sup_loss(pred_fwd: &CornerOffsets, pred_bwd: &CornerOffsets, gt: &CornerOffsets) -> Result<f64> {
    if pred_fwd.frame() != gt.frame() || pred_bwd.frame() != gt.frame() {
        return Err(Error::DimensionMismatch("corner offsets over different frames".into()));
    }
    let h_gt = offsets_to_homography(gt)?;
    let back = homography_to_offsets(&h_gt.invert()?, gt.frame())?;
    Ok(corner_l1(&pred_fwd.offsets, &gt.offsets) + corner_l1(&pred_bwd.offsets, &back.offsets))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ccl: f64,
    pub lambda_qal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ccl: 0.5,
            lambda_qal: 0.1,
        }
    }
}

/// `l_sup + lambda_ccl * l_ccl + lambda_qal * l_qal`.
pub fn total_loss(l_sup: f64, l_ccl: f64, l_qal: f64, w: &LossWeights) -> f64 {
    l_sup + w.lambda_ccl * l_ccl + w.lambda_qal * l_qal
}

/// Anything that maps an image pair to a source-to-target homography.
pub trait HomographyEstimator: Sync {
    fn name(&self) -> &str;
    fn estimate(&self, source: &ImageBuf, target: &ImageBuf) -> Result<Homography>;
}

/// Always answers the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityEstimator;

impl HomographyEstimator for IdentityEstimator {
    fn name(&self) -> &str {
        "identity"
    }

    fn estimate(&self, source: &ImageBuf, target: &ImageBuf) -> Result<Homography> {
        source.same_shape(target)?;
        Ok(Homography::identity())
    }
}

/// Lucas-Kanade from the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct LkEstimator {
    pub cfg: LkConfig,
}

impl HomographyEstimator for LkEstimator {
    fn name(&self) -> &str {
        "lk"
    }

    fn estimate(&self, source: &ImageBuf, target: &ImageBuf) -> Result<Homography> {
        lk_align(source, target, &self.cfg, &Homography::identity())?.h_ts.invert()
    }
}

/// Regressor prediction mapped back to full-image coordinates.
pub fn regressor_estimate(model: &RegressorModel, source: &ImageBuf, target: &ImageBuf) -> Result<Homography> {
    source.same_shape(target)?;
    let d = model.forward(source, target)?;
    let (ox, oy) = regressor::crop_shift(source, &model.spec);
    Ok(offsets_to_homography(&d)?.shifted(ox, oy))
}

#[derive(Clone, Debug)]
pub struct RegressorEstimator {
    pub model: RegressorModel,
}

impl HomographyEstimator for RegressorEstimator {
    fn name(&self) -> &str {
        "regressor"
    }

    fn estimate(&self, source: &ImageBuf, target: &ImageBuf) -> Result<Homography> {
        regressor_estimate(&self.model, source, target)
    }
}

/// Regressor prediction refined by Lucas-Kanade.
#[derive(Clone, Debug)]
pub struct RefinedEstimator {
    pub model: RegressorModel,
    pub lk: LkConfig,
}

impl HomographyEstimator for RefinedEstimator {
    fn name(&self) -> &str {
        "regressor+lk"
    }

    fn estimate(&self, source: &ImageBuf, target: &ImageBuf) -> Result<Homography> {
        let init = regressor_estimate(&self.model, source, target)?.invert()?;
        lk_align(source, target, &self.lk, &init)?.h_ts.invert()
    }
}
