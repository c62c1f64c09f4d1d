//! Point-matching error, inlier-proportion curves and per-category tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::HomographyEstimator;
use crate::homography::{Homography, Point};
use crate::imaging::{io, ImageBuf};

/// Marked point pairs `p` (source) -> `q` (target), in pixels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(Point, Point)>,
}

impl CorrespondenceSet {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::InsufficientData("correspondence set is empty".into()));
        }
        let inside = |p: &Point| {
            p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x <= width as f64 && p.y <= height as f64
        };
        if let Some(i) = self.pairs.iter().position(|(p, q)| !inside(p) || !inside(q)) {
            return Err(Error::InvalidConfig(format!("correspondence {i} lies outside the image")));
        }
        Ok(())
    }

    /// Mean `|q - p|`: the error of the no-warping baseline.
    pub fn mean_displacement(&self) -> f64 {
        self.pairs.iter().map(|(p, q)| (q - p).norm()).sum::<f64>() / self.pairs.len().max(1) as f64
    }
}

/// PME of one homography on one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pme {
    pub value: f64,
    /// Indices of points that mapped to infinity and were left out.
    pub excluded: Vec<usize>,
}

/// Mean Euclidean distance between `h(p)` and `q`.
pub fn pme(h: &Homography, corr: &CorrespondenceSet) -> Result<Pme> {
    if corr.pairs.is_empty() {
        return Err(Error::InsufficientData("correspondence set is empty".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = Vec::new();
    for (i, (p, q)) in corr.pairs.iter().enumerate() {
        match h.transform_point(*p) {
            Ok(r) => {
                sum += (r - q).norm();
                n += 1;
            }
            Err(_) => excluded.push(i),
        }
    }
    if !excluded.is_empty() {
        warn!("{} of {} points mapped to infinity and were excluded", excluded.len(), corr.pairs.len());
    }
    if n == 0 {
        return Err(Error::PointAtInfinity(corr.pairs[0].0.x, corr.pairs[0].0.y));
    }
    Ok(Pme {
        value: sum / n as f64,
        excluded,
    })
}

/// 30 log-spaced thresholds from 0.1 to 3.0 px.
pub fn default_thresholds() -> Vec<f64> {
    log_thresholds(0.1, 3.0, 30)
}

pub fn log_thresholds(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).ln();
    let mut t: Vec<f64> = (0..n).map(|i| lo * (ratio * i as f64 / (n - 1) as f64).exp()).collect();
    t[0] = lo;
    t[n - 1] = hi;
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub thresholds: Vec<f64>,
    pub inlier_fraction: Vec<f64>,
}

/// Fraction of pairs whose PME is at most each threshold.
pub fn robustness_curve(errors: &[f64], thresholds: &[f64]) -> RobustnessCurve {
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut t: Vec<f64> = thresholds.to_vec();
    t.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    let inlier_fraction = t
        .iter()
        .map(|&th| sorted.partition_point(|&e| e <= th) as f64 / n)
        .collect();
    RobustnessCurve {
        thresholds: t,
        inlier_fraction,
    }
}

/// A labeled evaluation pair.
#[derive(Clone, Debug)]
pub struct TestPair {
    pub id: String,
    pub source: ImageBuf,
    pub target: ImageBuf,
    pub correspondences: CorrespondenceSet,
    pub category: Option<String>,
}

/// On-disk `points.json`: either a bare `[[px, py, qx, qy], ...]` list or an
/// object with `points` and an optional `category`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointsFile {
    pub points: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PointsFileRepr {
    Bare(Vec<[f64; 4]>),
    Full(PointsFile),
}

pub fn parse_points(bytes: &[u8]) -> Result<PointsFile> {
    Ok(match serde_json::from_slice::<PointsFileRepr>(bytes)? {
        PointsFileRepr::Bare(points) => PointsFile { points, category: None },
        PointsFileRepr::Full(f) => f,
    })
}

/// Loads every subdirectory with `source.png`, `target.png` and `points.json`.
pub fn load_test_set(dir: impl AsRef<Path>) -> Result<Vec<TestPair>> {
    let dir = dir.as_ref();
    let mut subdirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("points.json").is_file())
        .collect();
    subdirs.sort();
    let mut out = Vec::with_capacity(subdirs.len());
    for sub in subdirs {
        let pts_path = sub.join("points.json");
        let bytes = fs::read(&pts_path).map_err(|e| Error::io(&pts_path, e))?;
        let pf = parse_points(&bytes)?;
        let source = io::load_image(sub.join("source.png"))?;
        let target = io::load_image(sub.join("target.png"))?;
        let correspondences = CorrespondenceSet {
            pairs: pf
                .points
                .iter()
                .map(|v| (Point::new(v[0], v[1]), Point::new(v[2], v[3])))
                .collect(),
        };
        correspondences.validate(source.width, source.height)?;
        out.push(TestPair {
            id: sub.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
            source,
            target,
            correspondences,
            category: pf.category,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: String,
    pub category: Option<String>,
    pub pme: f64,
    /// PME of the identity homography on the same points.
    pub identity_pme: f64,
    pub excluded_points: usize,
    /// Set when the estimator failed and identity was scored in its place.
    pub estimator_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub mean_pme: f64,
    pub mean_identity_pme: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_pme: f64,
    pub mean_identity_pme: f64,
    pub per_pair: Vec<PairResult>,
    pub per_category: BTreeMap<String, CategoryStats>,
    pub curve: RobustnessCurve,
}

/// Scores `estimator` on every pair. PME is averaged per pair, then across pairs.
pub fn evaluate_model(
    estimator: &dyn HomographyEstimator,
    test: &[TestPair],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set has no pairs".into()));
    }
    let per_pair: Vec<PairResult> = test
        .par_iter()
        .map(|pair| {
            let (h, err) = match estimator.estimate(&pair.source, &pair.target) {
                Ok(h) => (h, None),
                Err(e) => {
                    warn!("estimator failed on {}: {e}", pair.id);
                    (Homography::identity(), Some(e.to_string()))
                }
            };
            let scored = pme(&h, &pair.correspondences)?;
            let identity = pme(&Homography::identity(), &pair.correspondences)?;
            Ok(PairResult {
                id: pair.id.clone(),
                category: pair.category.clone(),
                pme: scored.value,
                identity_pme: identity.value,
                excluded_points: scored.excluded.len(),
                estimator_error: err,
            })
        })
        .collect::<Result<_>>()?;

    let mut per_category: BTreeMap<String, CategoryStats> = BTreeMap::new();
    for r in &per_pair {
        let key = r.category.clone().unwrap_or_else(|| "ALL".into());
        let e = per_category.entry(key).or_insert(CategoryStats {
            count: 0,
            mean_pme: 0.0,
            mean_identity_pme: 0.0,
        });
        e.count += 1;
        e.mean_pme += r.pme;
        e.mean_identity_pme += r.identity_pme;
    }
    for s in per_category.values_mut() {
        s.mean_pme /= s.count as f64;
        s.mean_identity_pme /= s.count as f64;
    }
    let n = per_pair.len() as f64;
    let errors: Vec<f64> = per_pair.iter().map(|r| r.pme).collect();
    Ok(EvalReport {
        mean_pme: errors.iter().sum::<f64>() / n,
        mean_identity_pme: per_pair.iter().map(|r| r.identity_pme).sum::<f64>() / n,
        curve: robustness_curve(&errors, thresholds),
        per_pair,
        per_category,
    })
}

/// Writes `pairs.csv`, `categories.csv`, `curve.csv`, `curve.svg` and `report.json`.
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: csv::Error| Error::io(path.clone(), std::io::Error::other(e))
    };

    let path = dir.join("pairs.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["id", "category", "pme", "identity_pme", "excluded_points", "estimator_error"])
        .map_err(csv_err(&path))?;
    for r in &report.per_pair {
        w.write_record([
            r.id.clone(),
            r.category.clone().unwrap_or_default(),
            r.pme.to_string(),
            r.identity_pme.to_string(),
            r.excluded_points.to_string(),
            r.estimator_error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("categories.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["category", "count", "mean_pme", "mean_identity_pme"])
        .map_err(csv_err(&path))?;
    for (k, s) in &report.per_category {
        w.write_record([k.clone(), s.count.to_string(), s.mean_pme.to_string(), s.mean_identity_pme.to_string()])
            .map_err(csv_err(&path))?;
    }
    w.write_record([
        "AVG".to_string(),
        report.per_pair.len().to_string(),
        report.mean_pme.to_string(),
        report.mean_identity_pme.to_string(),
    ])
    .map_err(csv_err(&path))?;
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("curve.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["threshold", "inlier_fraction"]).map_err(csv_err(&path))?;
    for (t, f) in report.curve.thresholds.iter().zip(&report.curve.inlier_fraction) {
        w.write_record([t.to_string(), f.to_string()]).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("curve.svg");
    fs::write(&path, curve_svg(&report.curve)).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Minimal standalone SVG line plot of an inlier curve.
pub fn curve_svg(curve: &RobustnessCurve) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let lo = curve.thresholds.first().copied().unwrap_or(0.0);
    let hi = curve.thresholds.last().copied().unwrap_or(1.0).max(lo + 1e-9);
    let px = |t: f64| pad + (t - lo) / (hi - lo) * (w - 2.0 * pad);
    let py = |f: f64| h - pad - f * (h - 2.0 * pad);
    let points: Vec<String> = curve
        .thresholds
        .iter()
        .zip(&curve.inlier_fraction)
        .map(|(&t, &f)| format!("{:.2},{:.2}", px(t), py(f)))
        .collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
            "<line x1=\"{pad}\" y1=\"{y0}\" x2=\"{pad}\" y2=\"{pad}\" stroke=\"black\"/>\n",
            "<text x=\"{pad}\" y=\"{ylab}\" font-size=\"12\">{lo}</text>\n",
            "<text x=\"{x1}\" y=\"{ylab}\" font-size=\"12\" text-anchor=\"end\">{hi} px</text>\n",
            "<text x=\"4\" y=\"{pad}\" font-size=\"12\">1.0</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pad = pad,
        y0 = h - pad,
        x1 = w - pad,
        ylab = h - pad + 16.0,
        lo = lo,
        hi = hi,
        pts = points.join(" "),
    )
}
