//! The iterative generate-then-train loop.

pub mod corpus;
pub mod shard;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    lk_align, regressor_estimate, total_loss, train_regressor, Example, LkConfig, LossWeights, RegressorEstimator,
    RegressorModel, RegressorSpec, TrainConfig,
};
use crate::eval::{default_thresholds, evaluate_model, write_report, EvalReport, TestPair};
use crate::generator::{assemble_sample, make_disturbance, DisturbanceConfig, GeneratorConfig, TrainingSample};
use crate::homography::{Homography, PerturbationRanges};
use crate::imaging::{abs_diff, ImageBuf, PlaneMask};
use crate::plane_seg::{estimate_masks, PlaneSegConfig};
use crate::refine::{
    accuracy, bce, ccm_apply, qam_features_within, qam_train, reference_image, CcmConfig, QamTrainConfig,
    QualityModel, N_FEATURES,
};
use crate::seed::{derive, sample_seed, stream};

pub use corpus::{load_corpus, save_corpus, synth_corpus, synth_test_set, CorpusSpec, ScenePair};
pub use shard::{load_shard, save_shard, SampleMasks, SampleMeta};

/// Every knob of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub master_seed: u64,
    pub iterations: u32,
    /// Synthetic corpus, used when `corpus_dir` is unset.
    pub corpus: CorpusSpec,
    pub corpus_dir: Option<PathBuf>,
    /// Held-out synthetic test set, used when `test_dir` is unset.
    pub test_set: CorpusSpec,
    pub test_dir: Option<PathBuf>,
    /// Range `H_gt` is drawn from.
    pub gt_ranges: PerturbationRanges,
    pub disturbance: DisturbanceConfig,
    pub plane_seg: PlaneSegConfig,
    pub generator: GeneratorConfig,
    pub ccm: CcmConfig,
    pub use_ccm: bool,
    pub qam: QamTrainConfig,
    pub use_qam: bool,
    /// Fraction of pairs held out from quality-model training.
    pub qam_holdout: f64,
    /// Mean change a disturbance must make inside the reference region to
    /// serve as a negative example.
    pub qam_min_disturbance: f64,
    pub lk: LkConfig,
    /// Refine regressor estimates with Lucas-Kanade in later iterations.
    pub lk_refine: bool,
    pub regressor: RegressorSpec,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub thresholds: Vec<f64>,
    pub save_masks: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            iterations: 2,
            corpus: CorpusSpec::default(),
            corpus_dir: None,
            test_set: CorpusSpec {
                pairs: 100,
                ..CorpusSpec::default()
            },
            test_dir: None,
            gt_ranges: PerturbationRanges::default(),
            disturbance: DisturbanceConfig::default(),
            plane_seg: PlaneSegConfig::default(),
            generator: GeneratorConfig::default(),
            ccm: CcmConfig::default(),
            use_ccm: true,
            qam: QamTrainConfig::default(),
            use_qam: true,
            qam_holdout: 0.25,
            qam_min_disturbance: 1e-3,
            lk: LkConfig::default(),
            lk_refine: true,
            regressor: RegressorSpec::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            thresholds: default_thresholds(),
            save_masks: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.qam.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !(self.plane_seg.rho > 0.0 && self.plane_seg.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.generator.eps_w) {
            return bad("eps_w must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.qam_holdout) {
            return bad("qam_holdout must lie in [0, 1)");
        }
        if !(self.qam_min_disturbance >= 0.0) {
            return bad("qam_min_disturbance must be non-negative");
        }
        if !(self.loss.lambda_ccl >= 0.0 && self.loss.lambda_qal >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.train.lr >= 0.0) || self.train.batch_size == 0 {
            return bad("training needs lr >= 0 and a positive batch size");
        }
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| w[1] < w[0]) {
            return bad("thresholds must be a nonempty ascending list");
        }
        if self.corpus_dir.is_none() {
            self.corpus.validate()?;
        }
        if self.test_dir.is_none() {
            self.test_set.validate()?;
        }
        self.gt_ranges.validate()?;
        self.disturbance.ranges.validate()
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: GenConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_string_pretty(self)?
        } else {
            self.to_toml()?
        };
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Estimator state carried between iterations.
#[derive(Clone, Debug, Default)]
pub enum EstimatorState {
    /// No trained model yet: Lucas-Kanade from the identity.
    #[default]
    Bootstrap,
    Trained(RegressorModel),
}

/// Per-pair generation product before quality filtering.
#[derive(Clone, Debug)]
pub struct PairOutput {
    pub sample: TrainingSample,
    pub masks: SampleMasks,
    pub ccl_before: f64,
    pub ccl_after: f64,
    pub clean_features: [f64; N_FEATURES],
    pub disturbed_features: [f64; N_FEATURES],
    /// Mean absolute change the disturbance made inside the reference region.
    pub disturbance_change: f64,
    pub hole_fraction: f64,
}

/// Target-to-source homography for the pair under the current state.
pub fn estimate_h_ts(cfg: &GenConfig, state: &EstimatorState, pair: &ScenePair) -> Result<Homography> {
    match state {
        EstimatorState::Bootstrap => Ok(lk_align(&pair.source, &pair.target, &cfg.lk, &Homography::identity())?.h_ts),
        EstimatorState::Trained(model) => {
            let h_ts = regressor_estimate(model, &pair.source, &pair.target)?.invert()?;
            if cfg.lk_refine {
                Ok(lk_align(&pair.source, &pair.target, &cfg.lk, &h_ts)?.h_ts)
            } else {
                Ok(h_ts)
            }
        }
    }
}

/// Runs generation and CCM on one pair and extracts quality features for
/// both the clean sample and its disturbance.
pub fn process_pair(cfg: &GenConfig, state: &EstimatorState, pair: &ScenePair, iteration: u32) -> Result<PairOutput> {
    let h_ts = estimate_h_ts(cfg, state, pair)?;
    let (m_s, m_t) = estimate_masks(&pair.source, &pair.target, &h_ts, &cfg.plane_seg)?;
    let gt_seed = sample_seed(cfg.master_seed, pair.id, iteration as u64, stream::GT);
    let (mut sample, comp) = assemble_sample(
        pair.id,
        iteration,
        gt_seed,
        &pair.source,
        &pair.target,
        &m_s,
        &m_t,
        &h_ts,
        &cfg.gt_ranges,
        &cfg.generator,
    )?;
    let (ccl_before, ccl_after) = if cfg.use_ccm {
        let out = ccm_apply(&sample.i_t_prime, &pair.target, &sample.h_gt, &h_ts, &cfg.ccm)?;
        sample.i_t_prime = out.image;
        (out.ccl_before, out.ccl_after)
    } else {
        let l = crate::refine::ccl_loss(&sample.i_t_prime, &pair.target, &sample.h_gt, &h_ts)?;
        (l, l)
    };
    let dist_seed = sample_seed(cfg.master_seed, pair.id, iteration as u64, stream::DISTURBANCE);
    let (disturbed, _) = make_disturbance(
        &pair.source,
        &pair.target,
        &m_s,
        &m_t,
        &sample.h_gt,
        &h_ts,
        &cfg.generator,
        &cfg.disturbance,
        dist_seed,
    )?;
    let (reference, ref_valid) = reference_image(&pair.target, &sample.h_gt, &h_ts)?;
    let clean_features = qam_features_within(&sample.i_t_prime, &reference, &ref_valid)?;
    let disturbed_features = qam_features_within(&disturbed.image, &reference, &ref_valid)?;
    let disturbance_change = mean_abs_within(&disturbed.image, &comp.image, &ref_valid)?;
    Ok(PairOutput {
        sample,
        masks: SampleMasks { m_s, m_t },
        ccl_before,
        ccl_after,
        clean_features,
        disturbed_features,
        disturbance_change,
        hole_fraction: comp.hole_fraction,
    })
}

fn mean_abs_within(a: &ImageBuf, b: &ImageBuf, valid: &PlaneMask) -> Result<f64> {
    let d = abs_diff(a, b)?;
    let c = d.channels;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, w) in valid.weights.iter().enumerate() {
        if *w >= 0.999 {
            sum += d.data[i * c..(i + 1) * c].iter().map(|v| *v as f64).sum::<f64>() / c as f64;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Deterministic quality-model hold-out membership.
pub fn is_holdout(master_seed: u64, iteration: u32, pair_id: u64, fraction: f64) -> bool {
    let h = derive(&[master_seed, iteration as u64, pair_id, stream::QAM]);
    ((h >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QamSummary {
    pub trained: bool,
    /// Why the model was not trained, when it was not.
    pub note: Option<String>,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    /// Fraction of hold-out pairs whose clean sample outscores its disturbance.
    pub holdout_ranking: f64,
    /// Disturbances that left the reference region unchanged; not used as negatives.
    pub ineffective_negatives: usize,
    pub final_bce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    pub pair_id: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub generated: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub quarantined: Vec<Quarantined>,
    pub empty_dominant_plane: usize,
    pub mean_hole_fraction: f64,
    pub mean_ccl_before: f64,
    pub mean_ccl_after: f64,
    pub qam: QamSummary,
    pub loss_curve: Vec<f64>,
    pub l_sup: f64,
    pub l_ccl: f64,
    pub l_qal: f64,
    pub l_total: f64,
    pub eval_pme: Option<f64>,
    pub eval_identity_pme: Option<f64>,
}

/// Generated, scored and filtered samples of one iteration.
#[derive(Clone, Debug)]
pub struct GeneratedShard {
    pub iteration: u32,
    pub outputs: Vec<PairOutput>,
    pub quarantined: Vec<Quarantined>,
    pub qam: QamSummary,
    pub quality_model: Option<QualityModel>,
}

impl GeneratedShard {
    pub fn samples(&self) -> Vec<TrainingSample> {
        self.outputs.iter().map(|o| o.sample.clone()).collect()
    }

    pub fn accepted(&self) -> impl Iterator<Item = &PairOutput> {
        self.outputs.iter().filter(|o| o.sample.provenance.accepted == Some(true))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn train_quality_model(cfg: &GenConfig, iteration: u32, outputs: &mut [PairOutput]) -> Result<(QamSummary, Option<QualityModel>)> {
    let mut summary = QamSummary {
        trained: false,
        note: None,
        train_pairs: 0,
        holdout_pairs: 0,
        train_accuracy: 0.0,
        holdout_accuracy: 0.0,
        holdout_ranking: 0.0,
        ineffective_negatives: 0,
        final_bce: 0.0,
    };
    if !cfg.use_qam {
        summary.note = Some("disabled".into());
        for o in outputs.iter_mut() {
            o.sample.provenance.accepted = Some(true);
        }
        return Ok((summary, None));
    }
    let hold: Vec<bool> = outputs
        .iter()
        .map(|o| is_holdout(cfg.master_seed, iteration, o.sample.provenance.pair_id, cfg.qam_holdout))
        .collect();
    let effective = |o: &PairOutput| o.disturbance_change >= cfg.qam_min_disturbance;
    summary.ineffective_negatives = outputs.iter().filter(|o| !effective(o)).count();
    let pick = |want: bool, clean: bool| -> Vec<Vec<f64>> {
        outputs
            .iter()
            .zip(&hold)
            .filter(|(o, h)| **h == want && (clean || effective(o)))
            .map(|(o, _)| if clean { o.clean_features.to_vec() } else { o.disturbed_features.to_vec() })
            .collect()
    };
    let (pos, neg) = (pick(false, true), pick(false, false));
    let (hpos, hneg) = (pick(true, true), pick(true, false));
    summary.train_pairs = pos.len();
    summary.holdout_pairs = hpos.len();
    let qcfg = QamTrainConfig {
        seed: derive(&[cfg.master_seed, iteration as u64, stream::QAM]),
        ..cfg.qam
    };
    let model = match qam_train(&pos, &neg, &qcfg) {
        Ok(m) => m,
        Err(Error::InsufficientData(msg)) => {
            warn!("iteration {iteration}: quality model skipped: {msg}");
            summary.note = Some(msg);
            for o in outputs.iter_mut() {
                o.sample.provenance.accepted = Some(true);
            }
            return Ok((summary, None));
        }
        Err(e) => return Err(e),
    };
    let labels = |n_pos: usize, n_neg: usize| -> Vec<f64> {
        std::iter::repeat(1.0).take(n_pos).chain(std::iter::repeat(0.0).take(n_neg)).collect()
    };
    let train_x: Vec<Vec<f64>> = pos.iter().chain(&neg).cloned().collect();
    summary.train_accuracy = accuracy(&model, &train_x, &labels(pos.len(), neg.len()), qcfg.tau);
    if !hpos.is_empty() {
        let hx: Vec<Vec<f64>> = hpos.iter().chain(&hneg).cloned().collect();
        summary.holdout_accuracy = accuracy(&model, &hx, &labels(hpos.len(), hneg.len()), qcfg.tau);
        let pairs: Vec<&PairOutput> = outputs.iter().zip(&hold).filter(|(o, h)| **h && effective(o)).map(|(o, _)| o).collect();
        let wins = pairs
            .iter()
            .filter(|o| model.score_features(&o.clean_features) > model.score_features(&o.disturbed_features))
            .count();
        summary.holdout_ranking = wins as f64 / pairs.len().max(1) as f64;
    }
    summary.final_bce = model.final_loss().unwrap_or(0.0);
    summary.trained = true;
    for o in outputs.iter_mut() {
        let s = model.score_features(&o.clean_features);
        o.sample.provenance.quality_score = Some(s);
        o.sample.provenance.accepted = Some(s > qcfg.tau);
    }
    Ok((summary, Some(model)))
}

/// Generation over the whole corpus, with CCM and quality filtering.
pub fn generate_shard(cfg: &GenConfig, corpus: &[ScenePair], state: &EstimatorState, iteration: u32) -> Result<GeneratedShard> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("corpus has no pairs".into()));
    }
    let results: Vec<(u64, Result<PairOutput>)> = corpus
        .par_iter()
        .map(|p| (p.id, process_pair(cfg, state, p, iteration)))
        .collect();
    let mut outputs = Vec::with_capacity(results.len());
    let mut quarantined = Vec::new();
    for (id, r) in results {
        match r {
            Ok(o) => outputs.push(o),
            Err(e) => {
                warn!("pair {id} quarantined: {e}");
                quarantined.push(Quarantined {
                    pair_id: id,
                    error: e.to_string(),
                });
            }
        }
    }
    let (qam, quality_model) = train_quality_model(cfg, iteration, &mut outputs)?;
    Ok(GeneratedShard {
        iteration,
        outputs,
        quarantined,
        qam,
        quality_model,
    })
}

/// Everything an iteration produced.
#[derive(Clone, Debug)]
pub struct IterationOutput {
    pub shard: GeneratedShard,
    pub report: IterationReport,
    pub eval: Option<EvalReport>,
    pub state: EstimatorState,
}

/// One generation pass and one training pass, then evaluation on `test` when given.
pub fn run_iteration(
    cfg: &GenConfig,
    corpus: &[ScenePair],
    state: &EstimatorState,
    iteration: u32,
    test: Option<&[TestPair]>,
) -> Result<IterationOutput> {
    let shard = generate_shard(cfg, corpus, state, iteration)?;
    let accepted: Vec<&PairOutput> = shard.accepted().collect();
    info!(
        "iteration {iteration}: {} generated, {} accepted, {} quarantined",
        shard.outputs.len(),
        accepted.len(),
        shard.quarantined.len()
    );
    if accepted.is_empty() {
        return Err(Error::EmptyDataset(format!("iteration {iteration}: no sample passed quality filtering")));
    }
    let examples: Vec<Example> = accepted
        .par_iter()
        .map(|o| Example::new(&o.sample.i_s, &o.sample.i_t_prime, &o.sample.h_gt, &cfg.regressor))
        .collect::<Result<_>>()?;
    let model = match state {
        EstimatorState::Trained(m) => m.clone(),
        EstimatorState::Bootstrap => RegressorModel::new(
            cfg.regressor.clone(),
            cfg.train.clone(),
            derive(&[cfg.master_seed, stream::REGRESSOR]),
        )?,
    };
    let train_cfg = TrainConfig {
        seed: sample_seed(cfg.master_seed, 0, iteration as u64, stream::REGRESSOR),
        ..cfg.train.clone()
    };
    let (model, curve) = train_regressor(&model, &examples, &train_cfg)?;
    let l_sup = model.loss(&examples);

    let l_ccl = mean(accepted.iter().map(|o| o.ccl_after));
    let l_qal = match &shard.quality_model {
        Some(m) => mean(
            accepted
                .iter()
                .map(|o| bce(m.score_features(&o.clean_features), 1.0) + bce(m.score_features(&o.disturbed_features), 0.0)),
        ),
        None => 0.0,
    };
    let l_total = total_loss(l_sup, l_ccl, l_qal, &cfg.loss);
    if !l_total.is_finite() {
        return Err(Error::NonFiniteLoss(format!("iteration {iteration}: total loss {l_total}")));
    }

    let eval = match test {
        Some(t) => Some(evaluate_model(
            &RegressorEstimator { model: model.clone() },
            t,
            &cfg.thresholds,
        )?),
        None => None,
    };
    let n = shard.outputs.len();
    let report = IterationReport {
        iteration,
        generated: n,
        accepted: accepted.len(),
        rejected: n - accepted.len(),
        quarantined: shard.quarantined.clone(),
        empty_dominant_plane: shard
            .outputs
            .iter()
            .filter(|o| o.sample.provenance.empty_dominant_plane)
            .count(),
        mean_hole_fraction: mean(shard.outputs.iter().map(|o| o.hole_fraction)),
        mean_ccl_before: mean(shard.outputs.iter().map(|o| o.ccl_before)),
        mean_ccl_after: mean(shard.outputs.iter().map(|o| o.ccl_after)),
        qam: shard.qam.clone(),
        loss_curve: curve.epochs,
        l_sup,
        l_ccl,
        l_qal,
        l_total,
        eval_pme: eval.as_ref().map(|e| e.mean_pme),
        eval_identity_pme: eval.as_ref().map(|e| e.mean_identity_pme),
    };
    Ok(IterationOutput {
        shard,
        report,
        eval,
        state: EstimatorState::Trained(model),
    })
}

/// Final model and per-iteration reports of [`run`].
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: RegressorModel,
    pub reports: Vec<IterationReport>,
    pub evals: Vec<EvalReport>,
}

/// Unlabeled corpus named by the config: loaded or synthesized.
pub fn corpus_for(cfg: &GenConfig) -> Result<Vec<ScenePair>> {
    match &cfg.corpus_dir {
        Some(dir) => load_corpus(dir),
        None => synth_corpus(&cfg.corpus, derive(&[cfg.master_seed, stream::CORPUS])),
    }
}

/// Held-out test set named by the config: loaded or synthesized.
pub fn test_set_for(cfg: &GenConfig) -> Result<Vec<TestPair>> {
    match &cfg.test_dir {
        Some(dir) => crate::eval::load_test_set(dir),
        None => synth_test_set(&cfg.test_set, derive(&[cfg.master_seed, stream::TEST_SET])),
    }
}

fn iteration_dir(out: &Path, iteration: u32) -> PathBuf {
    out.join(format!("iter_{iteration}"))
}

/// Writes the shard, quality model and report of one iteration under `out`.
pub fn save_iteration(cfg: &GenConfig, it: &IterationOutput, out: &Path) -> Result<()> {
    let dir = iteration_dir(out, it.report.iteration);
    save_generated(cfg, &it.shard, &dir)?;
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_vec_pretty(&it.report)?).map_err(|e| Error::io(&path, e))?;
    if let Some(e) = &it.eval {
        write_report(e, dir.join("eval"))?;
    }
    if let EstimatorState::Trained(m) = &it.state {
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_vec(m)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Writes `shard/` and `quality_model.json` for a generated shard.
pub fn save_generated(cfg: &GenConfig, shard: &GeneratedShard, dir: &Path) -> Result<()> {
    let samples = shard.samples();
    let masks: Vec<SampleMasks> = shard.outputs.iter().map(|o| o.masks.clone()).collect();
    save_shard(&samples, cfg.save_masks.then_some(masks.as_slice()), dir.join("shard"))?;
    if let Some(m) = &shard.quality_model {
        let path = dir.join("quality_model.json");
        fs::write(&path, serde_json::to_vec_pretty(m)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One CSV row per iteration.
pub fn write_summary_csv(reports: &[IterationReport], path: &Path) -> Result<()> {
    let to_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record([
        "iteration",
        "generated",
        "accepted",
        "rejected",
        "quarantined",
        "ccl_before",
        "ccl_after",
        "qam_holdout_accuracy",
        "l_sup",
        "l_total",
        "pme",
        "identity_pme",
    ])
    .map_err(to_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        w.write_record([
            r.iteration.to_string(),
            r.generated.to_string(),
            r.accepted.to_string(),
            r.rejected.to_string(),
            r.quarantined.len().to_string(),
            r.mean_ccl_before.to_string(),
            r.mean_ccl_after.to_string(),
            r.qam.holdout_accuracy.to_string(),
            r.l_sup.to_string(),
            r.l_total.to_string(),
            opt(r.eval_pme),
            opt(r.eval_identity_pme),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs `cfg.iterations` passes. With `out`, every iteration's shard,
/// reports and model are written below it, plus `summary.csv`,
/// `reports.json`, `model.json` and the resolved `config.toml`.
pub fn run(cfg: &GenConfig, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let corpus = corpus_for(cfg)?;
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("corpus has no pairs".into()));
    }
    let test = test_set_for(cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.save(dir.join("config.toml"))?;
    }
    let mut state = EstimatorState::Bootstrap;
    let mut reports = Vec::new();
    let mut evals = Vec::new();
    for k in 0..cfg.iterations {
        let it = run_iteration(cfg, &corpus, &state, k, (!test.is_empty()).then_some(test.as_slice()))?;
        if let Some(dir) = out {
            save_iteration(cfg, &it, dir)?;
        }
        if let Some(p) = it.report.eval_pme {
            info!("iteration {k}: held-out PME {p:.3}");
        }
        reports.push(it.report);
        evals.extend(it.eval);
        state = it.state;
    }
    let EstimatorState::Trained(model) = state else {
        unreachable!("at least one iteration ran");
    };
    if let Some(dir) = out {
        write_summary_csv(&reports, &dir.join("summary.csv"))?;
        let path = dir.join("reports.json");
        fs::write(&path, serde_json::to_vec_pretty(&reports)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_vec(&model)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(RunOutput { model, reports, evals })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(pairs: usize) -> GenConfig {
        GenConfig {
            master_seed: 17,
            iterations: 1,
            corpus: CorpusSpec {
                pairs,
                width: 64,
                height: 64,
                object_size: crate::homography::Interval::new(8.0, 14.0),
                object_motion: crate::homography::Interval::new(3.0, 6.0),
                ..CorpusSpec::default()
            },
            test_set: CorpusSpec {
                pairs: 4,
                width: 64,
                height: 64,
                ..CorpusSpec::default()
            },
            gt_ranges: PerturbationRanges {
                translation: crate::homography::Interval::symmetric(8.0),
                ..PerturbationRanges::default()
            },
            regressor: RegressorSpec {
                input_side: 8,
                hidden: vec![8],
                output_scale: 8.0,
                patch: crate::homography::Frame::new(64, 64),
            },
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            ..GenConfig::default()
        }
    }

    #[test]
    fn config_roundtrips_through_toml_and_json() {
        let cfg = GenConfig::default();
        let back: GenConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let back: GenConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.loss.lambda_ccl, 0.5);
        assert_eq!(cfg.loss.lambda_qal, 0.1);
        assert_eq!(cfg.iterations, 2);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: GenConfig = toml::from_str("master_seed = 5\n[qam]\ntau = 0.7\n").unwrap();
        assert_eq!(cfg.master_seed, 5);
        assert_eq!(cfg.qam.tau, 0.7);
        assert_eq!(cfg.qam.epochs, QamTrainConfig::default().epochs);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = GenConfig {
            iterations: 0,
            ..GenConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = GenConfig::default();
        cfg.qam.tau = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let cfg = small_cfg(0);
        let r = generate_shard(&cfg, &[], &EstimatorState::Bootstrap, 0);
        assert!(matches!(r, Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn holdout_split_is_stable() {
        let a: Vec<bool> = (0..200).map(|i| is_holdout(1, 0, i, 0.25)).collect();
        let b: Vec<bool> = (0..200).map(|i| is_holdout(1, 0, i, 0.25)).collect();
        assert_eq!(a, b);
        let n = a.iter().filter(|v| **v).count();
        assert!((30..70).contains(&n), "{n}");
    }

    #[test]
    fn small_iteration_is_deterministic() {
        let cfg = small_cfg(6);
        let corpus = corpus_for(&cfg).unwrap();
        let a = run_iteration(&cfg, &corpus, &EstimatorState::Bootstrap, 0, None).unwrap();
        let b = run_iteration(&cfg, &corpus, &EstimatorState::Bootstrap, 0, None).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.generated + a.report.quarantined.len(), 6);
        // Too few pairs for a quality model: everything passes.
        assert!(!a.report.qam.trained);
        assert_eq!(a.report.accepted, a.report.generated);
    }
}
