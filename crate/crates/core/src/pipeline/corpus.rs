//! Synthetic unlabeled pairs with known ground truth.
//!
//! Each scene is a procedurally textured plane seen under a random
//! homography, plus a few textured squares that move independently of the
//! plane. Because every pixel is rendered analytically, the plane homography,
//! object motions and object supports are exact.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{CorrespondenceSet, TestPair};
use crate::homography::{Frame, Homography, Interval, PerturbationRanges, Point};
use crate::imaging::{io, ImageBuf, PlaneMask};
use crate::seed::{sample_seed, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub pairs: usize,
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side length of the moving squares, pixels.
    pub object_size: Interval,
    /// Magnitude of each object's own translation, pixels.
    pub object_motion: Interval,
    /// Camera motion between the two views.
    pub plane_motion: PerturbationRanges,
    /// Number of sinusoids in the plane texture.
    pub texture_waves: usize,
    /// Wavelength range of those sinusoids, pixels.
    pub texture_wavelength: Interval,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            pairs: 200,
            width: 128,
            height: 128,
            min_objects: 0,
            max_objects: 3,
            object_size: Interval::new(16.0, 28.0),
            object_motion: Interval::new(6.0, 12.0),
            plane_motion: PerturbationRanges::default(),
            texture_waves: 6,
            texture_wavelength: Interval::new(12.0, 48.0),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::InvalidConfig("corpus images must be at least 32x32".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::InvalidConfig("min_objects exceeds max_objects".into()));
        }
        for (name, iv) in [
            ("object_size", self.object_size),
            ("object_motion", self.object_motion),
            ("texture_wavelength", self.texture_wavelength),
        ] {
            if !iv.is_valid() || iv.lo < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} interval is invalid")));
            }
        }
        if self.texture_wavelength.lo < 4.0 {
            return Err(Error::InvalidConfig("texture wavelengths below 4 px alias".into()));
        }
        self.plane_motion.validate()
    }

    pub fn frame(&self) -> Frame {
        Frame::new(self.width as u32, self.height as u32)
    }
}

/// A square that moves rigidly, on top of the plane motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    /// Top-left corner in the source view.
    pub x0: f64,
    pub y0: f64,
    pub size: f64,
    /// Translation relative to the plane, expressed in the source frame.
    pub motion: [f64; 2],
    pub mean: f64,
    pub noise_seed: u64,
}

impl ObjectTruth {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x0 + self.size && y >= self.y0 && y < self.y0 + self.size
    }

    pub fn motion_homography(&self) -> Homography {
        Homography::translation(self.motion[0], self.motion[1])
    }

    /// Object center in the source view.
    pub fn center(&self) -> Point {
        Point::new(self.x0 + self.size / 2.0, self.y0 + self.size / 2.0)
    }

    // Value noise on a 4 px lattice in object-local coordinates.
    fn intensity(&self, u: f64, v: f64) -> f64 {
        const CELL: f64 = 4.0;
        let gx = u / CELL;
        let gy = v / CELL;
        let (ix, iy) = (gx.floor(), gy.floor());
        let (fx, fy) = (gx - ix, gy - iy);
        let lattice = |i: f64, j: f64| -> f64 {
            let h = crate::seed::derive(&[self.noise_seed, i as i64 as u64, j as i64 as u64]);
            (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let top = lattice(ix, iy) * (1.0 - fx) + lattice(ix + 1.0, iy) * fx;
        let bot = lattice(ix, iy + 1.0) * (1.0 - fx) + lattice(ix + 1.0, iy + 1.0) * fx;
        (self.mean + 0.2 * (top * (1.0 - fy) + bot * fy)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amplitude: f64,
}

/// Everything needed to re-render a scene and to check generated data against it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTruth {
    /// Plane motion, source -> target.
    pub h_st: Homography,
    /// Plane motion, target -> source.
    pub h_ts: Homography,
    pub objects: Vec<ObjectTruth>,
    waves: Vec<Wave>,
    pub category: String,
}

impl PairTruth {
    fn plane_intensity(&self, x: f64, y: f64) -> f64 {
        let v: f64 = self
            .waves
            .iter()
            .map(|w| w.amplitude * (w.kx * x + w.ky * y + w.phase).sin())
            .sum();
        0.5 + v
    }

    // Scene radiance at source-frame point `(x, y)`; `moved` selects the target-time object layout.
    fn scene_at(&self, x: f64, y: f64, moved: bool) -> f64 {
        for o in &self.objects {
            let (ux, uy) = if moved { (x - o.motion[0], y - o.motion[1]) } else { (x, y) };
            if o.contains(ux, uy) {
                return o.intensity(ux - o.x0, uy - o.y0);
            }
        }
        self.plane_intensity(x, y)
    }

    /// 2x2 supersampled render of the source (`target = false`) or target view.
    pub fn render(&self, w: usize, h: usize, target: bool) -> ImageBuf {
        const SUB: [f64; 2] = [-0.25, 0.25];
        ImageBuf::from_fn(w, h, |px, py| {
            let mut acc = 0.0;
            for dy in SUB {
                for dx in SUB {
                    let (x, y) = (px as f64 + dx, py as f64 + dy);
                    let (sx, sy) = if target {
                        self.h_ts.apply(x, y).unwrap_or((f64::NAN, f64::NAN))
                    } else {
                        (x, y)
                    };
                    acc += if sx.is_finite() { self.scene_at(sx, sy, target) } else { 0.0 };
                }
            }
            (acc / 4.0) as f32
        })
    }

    // Supersampled coverage of a source-frame predicate, viewed in either frame.
    fn coverage(&self, w: usize, h: usize, target: bool, inside: impl Fn(f64, f64) -> bool) -> PlaneMask {
        const SUB: [f64; 4] = [-0.375, -0.125, 0.125, 0.375];
        PlaneMask::from_fn(w, h, |px, py| {
            let mut hits = 0;
            for dy in SUB {
                for dx in SUB {
                    let (x, y) = (px as f64 + dx, py as f64 + dy);
                    let p = if target { self.h_ts.apply(x, y) } else { Some((x, y)) };
                    if let Some((sx, sy)) = p {
                        if inside(sx, sy) {
                            hits += 1;
                        }
                    }
                }
            }
            hits as f32 / 16.0
        })
    }

    /// Fraction of each pixel covered by object `k` in the source (or target) view.
    pub fn object_support(&self, k: usize, w: usize, h: usize, target: bool) -> PlaneMask {
        let o = &self.objects[k];
        let (mx, my) = if target { (o.motion[0], o.motion[1]) } else { (0.0, 0.0) };
        self.coverage(w, h, target, |x, y| o.contains(x - mx, y - my))
    }

    /// Region whose content is not explained by the plane motion: the union
    /// of every object's source and moved footprints, in the chosen frame.
    pub fn inconsistent_support(&self, w: usize, h: usize, target: bool) -> PlaneMask {
        self.coverage(w, h, target, |x, y| {
            self.objects
                .iter()
                .any(|o| o.contains(x, y) || o.contains(x - o.motion[0], y - o.motion[1]))
        })
    }

    /// Ground-truth dominant-plane mask (`1 - inconsistent support`, binarized).
    pub fn plane_mask(&self, w: usize, h: usize, target: bool) -> PlaneMask {
        let s = self.inconsistent_support(w, h, target);
        PlaneMask {
            weights: s.weights.iter().map(|&v| if v > 0.0 { 0.0 } else { 1.0 }).collect(),
            ..s
        }
    }

    /// Up to 9 plane points on a 3x3 grid, away from objects, visible in both views.
    pub fn plane_correspondences(&self, w: usize, h: usize) -> CorrespondenceSet {
        let mut pairs = Vec::new();
        let margin = 4.0;
        for j in 0..3 {
            for i in 0..3 {
                let p = Point::new(w as f64 * (i as f64 + 0.5) / 3.0, h as f64 * (j as f64 + 0.5) / 3.0);
                let near_object = self.objects.iter().any(|o| {
                    [(0.0, 0.0), (o.motion[0], o.motion[1])].iter().any(|(mx, my)| {
                        p.x >= o.x0 + mx - margin
                            && p.x < o.x0 + mx + o.size + margin
                            && p.y >= o.y0 + my - margin
                            && p.y < o.y0 + my + o.size + margin
                    })
                });
                if near_object {
                    continue;
                }
                let Ok(q) = self.h_st.transform_point(p) else { continue };
                if q.x >= 0.0 && q.y >= 0.0 && q.x <= (w - 1) as f64 && q.y <= (h - 1) as f64 {
                    pairs.push((p, q));
                }
            }
        }
        CorrespondenceSet { pairs }
    }
}

/// One unlabeled pair, optionally with its ground truth.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub id: u64,
    pub source: ImageBuf,
    pub target: ImageBuf,
    pub truth: Option<PairTruth>,
}

fn place_objects(spec: &CorpusSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<ObjectTruth> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let margin = 6.0;
    let gap = 4.0;
    let mut out: Vec<ObjectTruth> = Vec::new();
    for _ in 0..n {
        for _attempt in 0..200 {
            let size = spec.object_size.sample(rng).round().max(2.0);
            let mag = spec.object_motion.sample(rng);
            let ang = rng.gen::<f64>() * TAU;
            let motion = [(mag * ang.cos()).round(), (mag * ang.sin()).round()];
            let lo_x = margin + (-motion[0]).max(0.0);
            let hi_x = w - margin - size - motion[0].max(0.0);
            let lo_y = margin + (-motion[1]).max(0.0);
            let hi_y = h - margin - size - motion[1].max(0.0);
            let ux: f64 = rng.gen();
            let uy: f64 = rng.gen();
            let mean = if rng.gen::<bool>() { 0.2 } else { 0.8 };
            let noise_seed: u64 = rng.gen();
            if hi_x <= lo_x || hi_y <= lo_y {
                continue;
            }
            let x0 = (lo_x + ux * (hi_x - lo_x)).round();
            let y0 = (lo_y + uy * (hi_y - lo_y)).round();
            let cand = ObjectTruth {
                x0,
                y0,
                size,
                motion,
                mean,
                noise_seed,
            };
            let bbox = |o: &ObjectTruth| {
                (
                    o.x0 + o.motion[0].min(0.0),
                    o.y0 + o.motion[1].min(0.0),
                    o.x0 + o.size + o.motion[0].max(0.0),
                    o.y0 + o.size + o.motion[1].max(0.0),
                )
            };
            let (ax0, ay0, ax1, ay1) = bbox(&cand);
            let clash = out.iter().any(|o| {
                let (bx0, by0, bx1, by1) = bbox(o);
                ax0 < bx1 + gap && bx0 < ax1 + gap && ay0 < by1 + gap && by0 < ay1 + gap
            });
            if !clash {
                out.push(cand);
                break;
            }
        }
    }
    out
}

fn category(objects: &[ObjectTruth], w: usize, h: usize) -> String {
    let area: f64 = objects.iter().map(|o| o.size * o.size).sum();
    let frac = area / (w * h) as f64;
    if objects.is_empty() {
        "RE".into()
    } else if frac < 0.06 {
        "SF".into()
    } else {
        "LF".into()
    }
}

/// Builds the scene description for one pair.
pub fn synth_truth(spec: &CorpusSpec, seed: u64) -> PairTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h_st = spec.plane_motion.sample_with(spec.frame(), &mut rng);
    let h_ts = h_st.invert().expect("sampled plane motion is invertible");
    let n_waves = spec.texture_waves.max(1);
    let waves = (0..n_waves)
        .map(|_| {
            let lambda = spec.texture_wavelength.sample(&mut rng);
            let theta = rng.gen::<f64>() * TAU;
            Wave {
                kx: TAU / lambda * theta.cos(),
                ky: TAU / lambda * theta.sin(),
                phase: rng.gen::<f64>() * TAU,
                amplitude: 0.4 / n_waves as f64 * (0.5 + 0.5 * rng.gen::<f64>()),
            }
        })
        .collect::<Vec<_>>();
    let n_obj = if spec.max_objects == 0 {
        0
    } else {
        rng.gen_range(spec.min_objects..=spec.max_objects)
    };
    let objects = place_objects(spec, n_obj, &mut rng);
    let category = category(&objects, spec.width, spec.height);
    PairTruth {
        h_st,
        h_ts,
        objects,
        waves,
        category,
    }
}

/// Renders one pair.
pub fn synth_pair(spec: &CorpusSpec, id: u64, seed: u64) -> ScenePair {
    let truth = synth_truth(spec, seed);
    ScenePair {
        id,
        source: truth.render(spec.width, spec.height, false),
        target: truth.render(spec.width, spec.height, true),
        truth: Some(truth),
    }
}

/// `spec.pairs` pairs; pair `i` depends only on `(seed, i)`.
pub fn synth_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<ScenePair>> {
    spec.validate()?;
    Ok((0..spec.pairs as u64)
        .into_par_iter()
        .map(|i| synth_pair(spec, i, sample_seed(seed, i, 0, stream::CORPUS)))
        .collect())
}

/// Labeled pairs with plane correspondences, for evaluation.
pub fn synth_test_set(spec: &CorpusSpec, seed: u64) -> Result<Vec<TestPair>> {
    spec.validate()?;
    Ok((0..spec.pairs as u64)
        .into_par_iter()
        .map(|i| {
            let pair = synth_pair(spec, i, sample_seed(seed, i, 0, stream::TEST_SET));
            let truth = pair.truth.expect("synthetic pairs carry truth");
            TestPair {
                id: format!("{i:04}"),
                source: pair.source,
                target: pair.target,
                correspondences: truth.plane_correspondences(spec.width, spec.height),
                category: Some(truth.category.clone()),
            }
        })
        .collect())
}

/// Writes `NNNN/{source.png, target.png, truth.json, points.json}` per pair.
pub fn save_corpus(pairs: &[ScenePair], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for p in pairs {
        let sub = dir.join(format!("{:04}", p.id));
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        io::save_image(&p.source, sub.join("source.png"))?;
        io::save_image(&p.target, sub.join("target.png"))?;
        if let Some(t) = &p.truth {
            let truth_path = sub.join("truth.json");
            fs::write(&truth_path, serde_json::to_vec_pretty(t)?).map_err(|e| Error::io(&truth_path, e))?;
            let pts = crate::eval::PointsFile {
                points: t
                    .plane_correspondences(p.source.width, p.source.height)
                    .pairs
                    .iter()
                    .map(|(a, b)| [a.x, a.y, b.x, b.y])
                    .collect(),
                category: Some(t.category.clone()),
            };
            let pts_path = sub.join("points.json");
            fs::write(&pts_path, serde_json::to_vec_pretty(&pts)?).map_err(|e| Error::io(&pts_path, e))?;
        }
    }
    Ok(())
}

/// Reads every subdirectory holding `source.png` and `target.png`, in name order.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<ScenePair>> {
    let dir = dir.as_ref();
    let mut subdirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("source.png").is_file() && p.join("target.png").is_file())
        .collect();
    subdirs.sort();
    subdirs
        .iter()
        .enumerate()
        .map(|(i, sub)| {
            let truth_path = sub.join("truth.json");
            let truth = if truth_path.is_file() {
                let bytes = fs::read(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
                Some(serde_json::from_slice(&bytes)?)
            } else {
                None
            };
            let id = sub
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.parse().ok())
                .unwrap_or(i as u64);
            Ok(ScenePair {
                id,
                source: io::load_image(sub.join("source.png"))?,
                target: io::load_image(sub.join("target.png"))?,
                truth,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::warp_same;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            pairs: 4,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn rendering_is_plane_consistent_off_objects() {
        let spec = CorpusSpec {
            max_objects: 0,
            ..small_spec()
        };
        let pair = synth_pair(&spec, 0, 5);
        let t = pair.truth.unwrap();
        let (aligned, valid) = warp_same(&pair.target, &t.h_ts).unwrap();
        let mut err = 0.0;
        let mut n = 0;
        for i in 0..aligned.data.len() {
            if valid.weights[i] > 0.999 {
                err += (aligned.data[i] - pair.source.data[i]).abs() as f64;
                n += 1;
            }
        }
        assert!(n > 8000);
        assert!(err / (n as f64) < 0.01, "mean residual {}", err / n as f64);
        assert!(pair.source.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn objects_do_not_overlap_and_stay_in_frame() {
        let spec = CorpusSpec {
            min_objects: 3,
            max_objects: 3,
            ..small_spec()
        };
        for seed in 0..20 {
            let t = synth_truth(&spec, seed);
            for o in &t.objects {
                assert!(o.x0 >= 0.0 && o.x0 + o.size + o.motion[0] <= 128.0);
                let m = (o.motion[0].powi(2) + o.motion[1].powi(2)).sqrt();
                assert!(m > 4.0);
            }
            let s = t.inconsistent_support(128, 128, false);
            let total: f64 = (0..t.objects.len()).map(|k| t.object_support(k, 128, 128, false).sum()).sum();
            assert!(s.sum() >= total - 1e-6);
        }
    }

    #[test]
    fn corpus_is_deterministic_and_roundtrips() {
        let spec = small_spec();
        let a = synth_corpus(&spec, 3).unwrap();
        let b = synth_corpus(&spec, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.source, y.source);
            assert_eq!(x.truth, y.truth);
        }
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&a, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.len(), a.len());
        assert_eq!(back[2].id, 2);
        assert_eq!(back[2].truth, a[2].truth);
        assert!(dir.path().join("0001/points.json").is_file());
    }

    #[test]
    fn correspondences_follow_plane() {
        let t = synth_truth(&small_spec(), 17);
        let c = t.plane_correspondences(128, 128);
        assert!(!c.pairs.is_empty());
        for (p, q) in &c.pairs {
            let r = t.h_st.transform_point(*p).unwrap();
            assert!((r - q).norm() < 1e-12);
        }
    }
}
