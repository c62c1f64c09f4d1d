//! Data refinement: reference-guided artifact removal (CCM) and the
//! logistic quality scorer (QAM).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homography::Homography;
use crate::imaging::{
    abs_diff, box_filter, feature_extract, morph, seam_energy, to_grayscale, warp_same, FeatureMap,
    ImageBuf, PlaneMask,
};

/// Coverage above which a warped pixel counts as fully valid.
const FULL: f32 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CcmConfig {
    /// Smoothed residual above which a pixel is an artifact.
    pub threshold: f32,
    pub smooth_radius: usize,
    pub feather_px: usize,
}

impl Default for CcmConfig {
    fn default() -> Self {
        Self {
            threshold: 0.10,
            smooth_radius: 1,
            feather_px: 2,
        }
    }
}

fn consistency_warp(h_gt: &Homography, h_ts: &Homography) -> Homography {
    h_gt.compose(h_ts)
}

/// Coverage-normalized `W(I_t, H_gt H_ts)` and its coverage.
pub fn reference_image(i_t: &ImageBuf, h_gt: &Homography, h_ts: &Homography) -> Result<(ImageBuf, PlaneMask)> {
    let (mut r, valid) = warp_same(i_t, &consistency_warp(h_gt, h_ts))?;
    let c = r.channels;
    for (i, v) in valid.weights.iter().enumerate() {
        if *v > 0.0 && *v < 1.0 {
            r.data[i * c..(i + 1) * c].iter_mut().for_each(|x| *x /= v);
        }
    }
    Ok((r, valid))
}

fn ccl_against(i_hat: &ImageBuf, f_t: &FeatureMap, back: &Homography) -> Result<f64> {
    let planes = feature_extract(i_hat).to_planes();
    let mut sum = 0.0f64;
    let mut n = 0usize;
    let mut cov = None;
    let mut warped = Vec::with_capacity(planes.len());
    for p in &planes {
        let (wp, v) = warp_same(p, back)?;
        warped.push(wp);
        cov.get_or_insert(v);
    }
    let cov = cov.expect("feature map has channels");
    let c = f_t.channels;
    for (i, v) in cov.weights.iter().enumerate() {
        if *v < FULL {
            continue;
        }
        for (k, wp) in warped.iter().enumerate() {
            sum += (wp.data[i] - f_t.data[i * c + k]).abs() as f64;
        }
        n += c;
    }
    if n == 0 {
        return Err(Error::DegenerateConfiguration(
            "consistency warp leaves no valid pixels".into(),
        ));
    }
    Ok(sum / n as f64)
}

/// Mean L1 between `W(F(i_hat), (H_gt H_ts)^-1)` and `F(i_t)` over pixels
/// the back-warp fully covers.
pub fn ccl_loss(i_hat: &ImageBuf, i_t: &ImageBuf, h_gt: &Homography, h_ts: &Homography) -> Result<f64> {
    i_hat.same_shape(i_t)?;
    let back = consistency_warp(h_gt, h_ts).invert()?;
    ccl_against(i_hat, &feature_extract(i_t), &back)
}

/// Artifact mask: smoothed `|img - reference| > threshold` where the
/// reference is fully valid.
pub fn artifact_mask(img: &ImageBuf, reference: &ImageBuf, ref_valid: &PlaneMask, cfg: &CcmConfig) -> Result<PlaneMask> {
    let diff = box_filter(&abs_diff(img, reference)?, cfg.smooth_radius);
    let (w, h) = img.dims();
    Ok(PlaneMask {
        width: w,
        height: h,
        weights: diff
            .data
            .iter()
            .zip(&ref_valid.weights)
            .map(|(d, v)| if *d > cfg.threshold && *v >= FULL { 1.0 } else { 0.0 })
            .collect(),
    })
}

/// Result of [`ccm_apply`].
#[derive(Clone, Debug)]
pub struct CcmOutcome {
    pub image: ImageBuf,
    pub ccl_before: f64,
    pub ccl_after: f64,
    /// Pixels flagged as artifacts (before feathering).
    pub detected: usize,
    /// Set when the replacement was discarded for raising the loss.
    pub reverted: bool,
}

/// Replaces detected artifacts in `i_t_prime` by the reference
/// `R = W(I_t, H_gt H_ts)` with a feathered edge.
///
/// The replacement is kept only if it does not raise [`ccl_loss`].
pub fn ccm_reconstruct(
    i_t_prime: &ImageBuf,
    i_t: &ImageBuf,
    h_gt: &Homography,
    h_ts: &Homography,
    cfg: &CcmConfig,
) -> Result<ImageBuf> {
    i_t_prime.same_shape(i_t)?;
    let (r, r_valid) = reference_image(i_t, h_gt, h_ts)?;
    if artifact_mask(i_t_prime, &r, &r_valid, cfg)?.sum() == 0.0 {
        return Ok(i_t_prime.clone());
    }
    Ok(ccm_apply(i_t_prime, i_t, h_gt, h_ts, cfg)?.image)
}

/// [`ccm_reconstruct`] that also reports the consistency loss around it.
pub fn ccm_apply(
    i_t_prime: &ImageBuf,
    i_t: &ImageBuf,
    h_gt: &Homography,
    h_ts: &Homography,
    cfg: &CcmConfig,
) -> Result<CcmOutcome> {
    i_t_prime.same_shape(i_t)?;
    let (r, r_valid) = reference_image(i_t, h_gt, h_ts)?;
    let detected = artifact_mask(i_t_prime, &r, &r_valid, cfg)?;
    let back = consistency_warp(h_gt, h_ts).invert()?;
    let f_t = feature_extract(i_t);
    let before = ccl_against(i_t_prime, &f_t, &back)?;
    let n_detected = detected.weights.iter().filter(|v| **v > 0.5).count();
    if n_detected == 0 {
        return Ok(CcmOutcome {
            image: i_t_prime.clone(),
            ccl_before: before,
            ccl_after: before,
            detected: 0,
            reverted: false,
        });
    }
    let mut alpha = morph::feather(&morph::dilate(&detected, cfg.feather_px), cfg.feather_px);
    for (a, v) in alpha.weights.iter_mut().zip(&r_valid.weights) {
        if *v < FULL {
            *a = 0.0;
        }
    }
    let c = i_t_prime.channels;
    let mut out = i_t_prime.clone();
    for (i, a) in alpha.weights.iter().enumerate() {
        if *a == 0.0 {
            continue;
        }
        for k in i * c..(i + 1) * c {
            out.data[k] = a * r.data[k] + (1.0 - a) * out.data[k];
        }
    }
    let after = ccl_against(&out, &f_t, &back)?;
    if after > before {
        log::debug!("ccm: replacement raised consistency loss {before:.4} -> {after:.4}; kept input");
        return Ok(CcmOutcome {
            image: i_t_prime.clone(),
            ccl_before: before,
            ccl_after: before,
            detected: n_detected,
            reverted: true,
        });
    }
    Ok(CcmOutcome {
        image: out,
        ccl_before: before,
        ccl_after: after,
        detected: n_detected,
        reverted: false,
    })
}

/// Version tag of the [`qam_features`] layout.
pub const FEATURE_VERSION: u32 = 1;
pub const N_FEATURES: usize = 5;

const SEAM_RESIDUAL: f32 = 0.1;
const VOID_LEVEL: f32 = 1e-4;

fn laplacian_energy(gray: &ImageBuf, valid: &[bool]) -> f64 {
    let (w, h) = gray.dims();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !valid[y * w + x] {
                continue;
            }
            let l = 4.0 * gray.get(x, y, 0)
                - gray.get(x - 1, y, 0)
                - gray.get(x + 1, y, 0)
                - gray.get(x, y - 1, 0)
                - gray.get(x, y + 1, 0);
            sum += (l as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Handcrafted quality features of `img` against a reference rendering.
///
/// Layout: `[mean residual, p95 residual, seam gradient excess,
/// log high-frequency ratio, void fraction]`.
pub fn qam_features(img: &ImageBuf, reference: &ImageBuf) -> Result<[f64; N_FEATURES]> {
    let (w, h) = img.dims();
    qam_features_within(img, reference, &PlaneMask::ones(w, h))
}

/// [`qam_features`] restricted to pixels where `valid` is (almost) 1.
pub fn qam_features_within(img: &ImageBuf, reference: &ImageBuf, valid: &PlaneMask) -> Result<[f64; N_FEATURES]> {
    img.same_shape(reference)?;
    valid.check_matches(img)?;
    let (w, h) = img.dims();
    let inside: Vec<bool> = valid.weights.iter().map(|v| *v >= FULL).collect();
    let n_in = inside.iter().filter(|b| **b).count();
    if n_in == 0 {
        return Err(Error::DegenerateConfiguration("no valid pixels for quality features".into()));
    }
    let g_img = to_grayscale(img);
    let g_ref = to_grayscale(reference);
    let resid = abs_diff(&g_img, &g_ref)?;

    let mut r: Vec<f32> = resid.data.iter().zip(&inside).filter(|(_, b)| **b).map(|(v, _)| *v).collect();
    let mean = r.iter().map(|v| *v as f64).sum::<f64>() / n_in as f64;
    let k = ((n_in as f64 * 0.95).ceil() as usize).clamp(1, n_in) - 1;
    r.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    let p95 = r[k] as f64;

    let smooth = box_filter(&resid, 1);
    let region = PlaneMask {
        width: w,
        height: h,
        weights: smooth.data.iter().map(|v| if *v > SEAM_RESIDUAL { 1.0 } else { 0.0 }).collect(),
    };
    let within = PlaneMask {
        width: w,
        height: h,
        weights: inside.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect(),
    };
    let band = morph::boundary_band(&region, 2, Some(&within));
    let seam = if band.sum() > 0.0 {
        seam_energy(&g_img, &band)? - seam_energy(&g_ref, &band)?
    } else {
        0.0
    };

    let eps = 1e-4;
    let hf = ((laplacian_energy(&g_img, &inside) + eps) / (laplacian_energy(&g_ref, &inside) + eps)).ln();

    let void = g_img
        .data
        .iter()
        .zip(&g_ref.data)
        .zip(&inside)
        .filter(|((a, b), i)| **i && **a < VOID_LEVEL && **b >= VOID_LEVEL)
        .count() as f64
        / n_in as f64;

    let f = [mean, p95, seam, hf, void];
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quality features"));
    }
    Ok(f)
}

/// Binary cross-entropy of probability `p` against label `y`.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// BCE evaluated from the logit `z`, stable for large `|z|`.
pub fn bce_logit(z: f64, y: f64) -> f64 {
    // -y log s(z) - (1-y) log(1-s(z)) = max(z,0) - y z + log(1 + e^-|z|)
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Class-balanced objective `mean_pos BCE(., 1) + mean_neg BCE(., 0)` on
/// already-standardized features, with its gradient `(d/dw, d/db)`.
pub fn logistic_objective(weights: &[f64], bias: f64, x: &[Vec<f64>], y: &[f64]) -> (f64, Vec<f64>, f64) {
    let n_pos = y.iter().filter(|v| **v > 0.5).count().max(1) as f64;
    let n_neg = y.iter().filter(|v| **v <= 0.5).count().max(1) as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let z = bias + weights.iter().zip(xi).map(|(w, v)| w * v).sum::<f64>();
        let scale = if yi > 0.5 { 1.0 / n_pos } else { 1.0 / n_neg };
        loss += scale * bce_logit(z, yi);
        let d = scale * (sigmoid(z) - yi);
        for (g, v) in gw.iter_mut().zip(xi) {
            *g += d * v;
        }
        gb += d;
    }
    (loss, gw, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QamTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub tau: f64,
}

impl Default for QamTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.5,
            seed: 0,
            tau: 0.5,
        }
    }
}

/// Logistic scorer over standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityModel {
    pub version: u32,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub tau: f64,
    pub trained: bool,
    /// Training objective per epoch, last entry after the final step.
    pub losses: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    pub tau: f64,
    pub accepted: bool,
}

impl QualityScore {
    /// Acceptance is strict: a score equal to `tau` is rejected.
    pub fn new(value: f64, tau: f64) -> Self {
        Self {
            value,
            tau,
            accepted: value > tau,
        }
    }
}

const SCORE_EDGE: f64 = 1e-12;

impl QualityModel {
    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Probability that `features` come from a clean sample, kept in (0, 1).
    pub fn score_features(&self, features: &[f64]) -> f64 {
        let x = self.standardize(features);
        let z = self.bias + self.weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
        sigmoid(z).clamp(SCORE_EDGE, 1.0 - SCORE_EDGE)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Fits a logistic model by full-batch gradient descent.
///
/// `labels` are 1 for clean and 0 for disturbed examples. Features are
/// standardized with statistics stored in the model.
pub fn fit_logistic(features: &[Vec<f64>], labels: &[f64], cfg: &QamTrainConfig) -> Result<QualityModel> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch("ragged or empty feature rows".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(mean.iter().zip(&scale)).map(|(v, (m, s))| (v - m) / s).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.01..0.01)).collect();
    let mut bias = 0.0;
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let (loss, gw, gb) = logistic_objective(&weights, bias, &x, labels);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("quality model loss {loss} at epoch {}", losses.len())));
        }
        losses.push(loss);
        for (w, g) in weights.iter_mut().zip(&gw) {
            *w -= cfg.lr * g;
        }
        bias -= cfg.lr * gb;
    }
    let (loss, _, _) = logistic_objective(&weights, bias, &x, labels);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("quality model final loss {loss}")));
    }
    losses.push(loss);
    Ok(QualityModel {
        version: FEATURE_VERSION,
        weights,
        bias,
        mean,
        scale,
        tau: cfg.tau,
        trained: true,
        losses,
    })
}

/// Minimum examples required per class.
pub const MIN_PER_CLASS: usize = 10;

/// Trains the scorer on clean (`pos`) and disturbed (`neg`) feature vectors.
pub fn qam_train(pos: &[Vec<f64>], neg: &[Vec<f64>], cfg: &QamTrainConfig) -> Result<QualityModel> {
    if pos.len() < MIN_PER_CLASS || neg.len() < MIN_PER_CLASS {
        return Err(Error::InsufficientData(format!(
            "quality model needs {MIN_PER_CLASS} examples per class, got {} clean / {} disturbed",
            pos.len(),
            neg.len()
        )));
    }
    let features: Vec<Vec<f64>> = pos.iter().chain(neg).cloned().collect();
    let labels: Vec<f64> = std::iter::repeat(1.0)
        .take(pos.len())
        .chain(std::iter::repeat(0.0).take(neg.len()))
        .collect();
    fit_logistic(&features, &labels, cfg)
}

/// Scores `img` against its reference and applies threshold `tau`.
pub fn qam_score(model: &QualityModel, img: &ImageBuf, reference: &ImageBuf, tau: f64) -> Result<QualityScore> {
    let f = qam_features(img, reference)?;
    Ok(QualityScore::new(model.score_features(&f), tau))
}

/// Fraction of `(features, label)` rows the model classifies correctly at `tau`.
pub fn accuracy(model: &QualityModel, features: &[Vec<f64>], labels: &[f64], tau: f64) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    let hits = features
        .iter()
        .zip(labels)
        .filter(|(f, y)| QualityScore::new(model.score_features(f), tau).accepted == (**y > 0.5))
        .count();
    hits as f64 / features.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn smooth(w: usize, h: usize) -> ImageBuf {
        ImageBuf::from_fn(w, h, |x, y| {
            0.5 + 0.25 * (x as f32 * 0.15).sin() + 0.2 * (y as f32 * 0.11).cos()
        })
    }

    fn toy(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            x.push(vec![1.0 + i as f64 * 0.1]);
            y.push(1.0);
            x.push(vec![-1.0 - i as f64 * 0.1]);
            y.push(0.0);
        }
        (x, y)
    }

    #[test]
    fn bce_at_half_is_ln2() {
        assert_abs_diff_eq!(bce(0.5, 1.0), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(bce(0.5, 0.0), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(bce_logit(0.0, 1.0), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(bce_logit(3.0, 0.0), bce(sigmoid(3.0), 0.0), epsilon = 1e-12);
    }

    #[test]
    fn separable_toy_converges() {
        let (x, y) = toy(10);
        let m = fit_logistic(&x, &y, &QamTrainConfig::default()).unwrap();
        assert_eq!(accuracy(&m, &x, &y, 0.5), 1.0);
        assert!(m.final_loss().unwrap() < 0.1);
    }

    #[test]
    fn small_lr_loss_is_monotone() {
        let (x, y) = toy(10);
        let cfg = QamTrainConfig {
            lr: 0.01,
            ..QamTrainConfig::default()
        };
        let m = fit_logistic(&x, &y, &cfg).unwrap();
        for w in m.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let (x, y) = toy(10);
        let cfg = QamTrainConfig {
            seed: 3,
            ..QamTrainConfig::default()
        };
        assert_eq!(fit_logistic(&x, &y, &cfg).unwrap(), fit_logistic(&x, &y, &cfg).unwrap());
    }

    #[test]
    fn qam_train_needs_ten_per_class() {
        let (x, _) = toy(9);
        let pos: Vec<_> = x.iter().step_by(2).cloned().collect();
        let neg: Vec<_> = x.iter().skip(1).step_by(2).cloned().collect();
        assert!(matches!(
            qam_train(&pos, &neg, &QamTrainConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn threshold_is_strict() {
        assert!(QualityScore::new(0.9, 0.5).accepted);
        assert!(!QualityScore::new(0.5, 0.5).accepted);
    }

    #[test]
    fn extreme_thresholds() {
        let (x, y) = toy(10);
        let m = fit_logistic(&x, &y, &QamTrainConfig::default()).unwrap();
        for f in &x {
            let s = m.score_features(f);
            assert!(s > 0.0 && s < 1.0);
            assert!(QualityScore::new(s, 0.0).accepted);
            assert!(!QualityScore::new(s, 1.0).accepted);
        }
        assert!(m.score_features(&[1e9]) < 1.0);
    }

    proptest! {
        #[test]
        fn logistic_gradient_matches_finite_difference(
            w in proptest::collection::vec(-1.0f64..1.0, 3),
            b in -1.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let y: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
            let (_, gw, gb) = logistic_objective(&w, b, &x, &y);
            let h = 1e-5;
            for k in 0..3 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[k] += h;
                wm[k] -= h;
                let fd = (logistic_objective(&wp, b, &x, &y).0 - logistic_objective(&wm, b, &x, &y).0) / (2.0 * h);
                let rel = (fd - gw[k]).abs() / fd.abs().max(gw[k].abs()).max(1e-8);
                prop_assert!(rel < 1e-5, "w{k}: {fd} vs {}", gw[k]);
            }
            let fd = (logistic_objective(&w, b + h, &x, &y).0 - logistic_objective(&w, b - h, &x, &y).0) / (2.0 * h);
            let rel = (fd - gb).abs() / fd.abs().max(gb.abs()).max(1e-8);
            prop_assert!(rel < 1e-5);
        }
    }

    #[test]
    fn ccl_of_exact_reference_is_small() {
        let i_t = smooth(64, 48);
        let h_gt = Homography::translation(1.5, -0.75);
        let h_ts = Homography::translation(-0.5, 0.25);
        let (r, _) = warp_same(&i_t, &h_gt.compose(&h_ts)).unwrap();
        let l = ccl_loss(&r, &i_t, &h_gt, &h_ts).unwrap();
        assert!(l < 0.01, "{l}");
    }

    #[test]
    fn ccl_constant_cases() {
        let flat = ImageBuf::filled(32, 32, 1, 0.4);
        let id = Homography::identity();
        assert_eq!(ccl_loss(&flat, &flat, &id, &id).unwrap(), 0.0);
        assert!(ccl_loss(&flat, &smooth(32, 32), &id, &id).unwrap() > 0.0);
    }

    #[test]
    fn ccm_identity_cases() {
        let i_t = smooth(48, 48);
        let h_gt = Homography::translation(1.0, 2.0);
        let id = Homography::identity();
        let (r, _) = warp_same(&i_t, &h_gt).unwrap();
        assert_eq!(ccm_reconstruct(&r, &i_t, &h_gt, &id, &CcmConfig::default()).unwrap(), r);

        let mut seam = r.clone();
        for y in 0..48 {
            seam.set(20, y, 0, 1.0);
        }
        let off = CcmConfig {
            threshold: 1.0,
            ..CcmConfig::default()
        };
        assert_eq!(ccm_reconstruct(&seam, &i_t, &h_gt, &id, &off).unwrap(), seam);
    }

    #[test]
    fn ccm_removes_injected_seam() {
        let i_t = smooth(64, 64);
        let h_gt = Homography::translation(1.0, 0.5);
        let id = Homography::identity();
        let (r, _) = warp_same(&i_t, &h_gt).unwrap();
        let mut seam = r.clone();
        for y in 8..56 {
            for x in 30..32 {
                let v = seam.get(x, y, 0);
                seam.set(x, y, 0, (v + 0.5).min(1.0));
            }
        }
        let before = ccl_loss(&seam, &i_t, &h_gt, &id).unwrap();
        let fixed = ccm_reconstruct(&seam, &i_t, &h_gt, &id, &CcmConfig::default()).unwrap();
        let after = ccl_loss(&fixed, &i_t, &h_gt, &id).unwrap();
        assert!(after < before, "{after} vs {before}");
        assert!((fixed.get(30, 30, 0) - r.get(30, 30, 0)).abs() < 1e-3);
    }

    #[test]
    fn features_zero_on_self_and_deterministic() {
        let img = smooth(40, 40);
        let f = qam_features(&img, &img).unwrap();
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[2], 0.0);
        assert_eq!(f[3], 0.0);
        assert_eq!(f[4], 0.0);
        let other = smooth(40, 40).map(|v| v * 0.8);
        assert_eq!(qam_features(&other, &img).unwrap(), qam_features(&other, &img).unwrap());
    }

    #[test]
    fn model_json_roundtrip() {
        let (x, y) = toy(10);
        let m = fit_logistic(&x, &y, &QamTrainConfig::default()).unwrap();
        let back: QualityModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
