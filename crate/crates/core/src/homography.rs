//! Planar projective algebra.
//!
//! A [`Homography`] maps pixel coordinates of one view onto another,
//! `p' ~ H p`. Pixel centers sit on integer coordinates, so a `w x h` patch
//! spans corners `(0, 0)` to `(w - 1, h - 1)`.

use nalgebra::{DMatrix, Matrix3, Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Point2<f64>;

/// Smallest admissible `|det|` of a normalized homography.
pub const DET_FLOOR: f64 = 1e-12;
/// `|w|` below which a projected point is treated as being at infinity.
pub const W_FLOOR: f64 = 1e-12;

/// 3x3 projective transform, stored normalized (`m[2][2] == 1` when nonzero).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography {
    m: Matrix3<f64>,
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = Error;

    fn try_from(v: [f64; 9]) -> Result<Self> {
        Homography::from_row_slice(&v)
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.to_array()
    }
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self {
            m: Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0),
        }
    }

    /// Validated constructor: normalizes, then rejects non-finite or singular matrices.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("homography entries"));
        }
        let h = Self { m: normalize(&m) };
        let det = h.m.determinant();
        if !(det.abs() > DET_FLOOR) {
            return Err(Error::SingularMatrix(det.abs()));
        }
        Ok(h)
    }

    /// Builds from 9 row-major values.
    pub fn from_row_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::DimensionMismatch(format!(
                "homography needs 9 values, got {}",
                v.len()
            )));
        }
        Self::from_matrix(Matrix3::from_row_slice(v))
    }

    /// Normalizes without validation. Used where invertibility is already implied.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self { m: normalize(&m) }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major entries.
    pub fn to_array(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Homography {
        Self::from_matrix_unchecked(self.m * other.m)
    }

    pub fn invert(&self) -> Result<Homography> {
        let det = self.m.determinant();
        if !(det.abs() > DET_FLOOR) {
            return Err(Error::SingularMatrix(det.abs()));
        }
        let inv = self.m.try_inverse().ok_or(Error::SingularMatrix(det.abs()))?;
        Ok(Self::from_matrix_unchecked(inv))
    }

    /// Perspective-divided image of `p`.
    pub fn transform_point(&self, p: Point) -> Result<Point> {
        let (x, y) = self.apply(p.x, p.y).ok_or(Error::PointAtInfinity(p.x, p.y))?;
        Ok(Point::new(x, y))
    }

    /// Raw projection used in inner loops; `None` when the point goes to infinity.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w.abs() < W_FLOOR {
            return None;
        }
        Some((
            (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w,
            (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w,
        ))
    }

    /// Conjugates by a translation: `T(dx,dy) * self * T(-dx,-dy)`.
    pub fn shifted(&self, dx: f64, dy: f64) -> Homography {
        Homography::translation(dx, dy)
            .compose(self)
            .compose(&Homography::translation(-dx, -dy))
    }

    /// Largest absolute entry difference against `other`.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.m - other.m).amax()
    }
}

/// Divides by the bottom-right entry, or falls back to unit Frobenius norm
/// with a positive leading entry when that entry vanishes.
pub fn normalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let norm = m.norm();
    if norm == 0.0 {
        return *m;
    }
    let c = m[(2, 2)];
    if c.abs() > 1e-12 * norm {
        return m / c;
    }
    let lead = m.iter().copied().find(|v| v.abs() > 1e-12 * norm).unwrap_or(1.0);
    m / (norm * lead.signum())
}

/// A point pair `source -> target`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub source: Point,
    pub target: Point,
}

impl Correspondence {
    pub fn new(sx: f64, sy: f64, tx: f64, ty: f64) -> Self {
        Self {
            source: Point::new(sx, sy),
            target: Point::new(tx, ty),
        }
    }
}

// Hartley conditioning: centroid to origin, mean distance sqrt(2).
fn conditioning(pts: &[Point]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cx, cy) = pts
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p.x / n, y + p.y / n));
    let mean_dist = pts
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn check_distinct(pts: &[Point], what: &str) -> Result<()> {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            if (pts[i] - pts[j]).norm() < 1e-9 {
                return Err(Error::DegenerateConfiguration(format!(
                    "duplicate {what} points {i} and {j}"
                )));
            }
        }
    }
    Ok(())
}

fn check_no_collinear_triple(pts: &[Point], what: &str) -> Result<()> {
    let extent = pts
        .iter()
        .flat_map(|p| pts.iter().map(move |q| (p - q).norm()))
        .fold(0.0_f64, f64::max);
    let tol = 1e-9 * extent * extent;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let a = pts[j] - pts[i];
                let b = pts[k] - pts[i];
                if (a.x * b.y - a.y * b.x).abs() <= tol {
                    return Err(Error::DegenerateConfiguration(format!(
                        "{what} points {i}, {j}, {k} are collinear"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Direct linear transform on 4 or more correspondences.
///
/// Both point sets are conditioned independently, the `2n x 9` system is
/// solved for its smallest right singular vector, and the result is
/// de-conditioned back to pixel coordinates.
pub fn dlt_solve(corr: &[Correspondence]) -> Result<Homography> {
    let n = corr.len();
    if n < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 4 correspondences, got {n}"
        )));
    }
    if corr
        .iter()
        .any(|c| !(c.source.x.is_finite() && c.source.y.is_finite() && c.target.x.is_finite() && c.target.y.is_finite()))
    {
        return Err(Error::NonFinite("correspondences"));
    }
    let src: Vec<Point> = corr.iter().map(|c| c.source).collect();
    let dst: Vec<Point> = corr.iter().map(|c| c.target).collect();
    check_distinct(&src, "source")?;
    check_distinct(&dst, "target")?;
    if n == 4 {
        check_no_collinear_triple(&src, "source")?;
        check_no_collinear_triple(&dst, "target")?;
    }

    let ts = conditioning(&src);
    let td = conditioning(&dst);
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in src.iter().zip(&dst).enumerate() {
        let p = ts * Vector3::new(s.x, s.y, 1.0);
        let q = td * Vector3::new(d.x, d.y, 1.0);
        let (x, y) = (p.x, p.y);
        let (u, v) = (q.x, q.y);
        let r = 2 * k;
        a[(r, 0)] = -x;
        a[(r, 1)] = -y;
        a[(r, 2)] = -1.0;
        a[(r, 6)] = u * x;
        a[(r, 7)] = u * y;
        a[(r, 8)] = u;
        a[(r + 1, 3)] = -x;
        a[(r + 1, 4)] = -y;
        a[(r + 1, 5)] = -1.0;
        a[(r + 1, 6)] = v * x;
        a[(r + 1, 7)] = v * y;
        a[(r + 1, 8)] = v;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::RankDeficient(0.0))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let largest = sv[order[0]];
    let second_smallest = sv[order[7]];
    let ratio = if largest > 0.0 { second_smallest / largest } else { 0.0 };
    if ratio < 1e-10 {
        return Err(Error::RankDeficient(ratio));
    }
    let h = v_t.row(order[8]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or(Error::DegenerateConfiguration("target conditioning".into()))?;
    Homography::from_matrix(td_inv * hn * ts)
}

/// Pixel extent of the patch the offsets refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
}

impl Frame {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    /// Corners in order top-left, top-right, bottom-right, bottom-left.
    pub fn corners(&self) -> [Point; 4] {
        let w = self.width as f64 - 1.0;
        let h = self.height as f64 - 1.0;
        [
            Point::new(0.0, 0.0),
            Point::new(w, 0.0),
            Point::new(w, h),
            Point::new(0.0, h),
        ]
    }

    pub fn center(&self) -> Point {
        Point::new(
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }
}

/// Displacements `(dx, dy)` of the four frame corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerOffsets {
    pub offsets: [f64; 8],
    pub width: u32,
    pub height: u32,
}

impl CornerOffsets {
    pub fn new(offsets: [f64; 8], frame: Frame) -> Self {
        Self {
            offsets,
            width: frame.width,
            height: frame.height,
        }
    }

    pub fn zeros(frame: Frame) -> Self {
        Self::new([0.0; 8], frame)
    }

    pub fn frame(&self) -> Frame {
        Frame::new(self.width, self.height)
    }

    pub fn corner(&self, k: usize) -> (f64, f64) {
        (self.offsets[2 * k], self.offsets[2 * k + 1])
    }
}

/// Solves the homography that moves each frame corner by its offset.
pub fn offsets_to_homography(d: &CornerOffsets) -> Result<Homography> {
    if d.width == 0 || d.height == 0 {
        return Err(Error::InvalidConfig("frame dimensions must be positive".into()));
    }
    if d.offsets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("corner offsets"));
    }
    let corr: Vec<Correspondence> = d
        .frame()
        .corners()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let (dx, dy) = d.corner(k);
            Correspondence::new(c.x, c.y, c.x + dx, c.y + dy)
        })
        .collect();
    dlt_solve(&corr)
}

pub fn homography_to_offsets(h: &Homography, frame: Frame) -> Result<CornerOffsets> {
    let mut offsets = [0.0; 8];
    for (k, c) in frame.corners().iter().enumerate() {
        let p = h.transform_point(*c)?;
        offsets[2 * k] = p.x - c.x;
        offsets[2 * k + 1] = p.y - c.y;
    }
    Ok(CornerOffsets::new(offsets, frame))
}

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub const fn symmetric(r: f64) -> Self {
        Self { lo: -r, hi: r }
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Always consumes exactly one draw, so degenerate intervals keep the stream aligned.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        if self.lo == self.hi {
            self.lo
        } else {
            self.lo + u * (self.hi - self.lo)
        }
    }
}

/// Small-baseline ranges for the factors of a sampled ground-truth homography.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationRanges {
    /// Isotropic scale, around 1.
    pub scaling: Interval,
    /// Shear factors (x and y drawn independently), around 0.
    pub shearing: Interval,
    /// Radians.
    pub rotation: Interval,
    /// Pixels, drawn independently for x and y.
    pub translation: Interval,
    /// Projective row entries, inverse pixels about the patch center.
    pub perspective: Interval,
}

impl Default for PerturbationRanges {
    fn default() -> Self {
        Self {
            scaling: Interval::new(0.9, 1.1),
            shearing: Interval::symmetric(0.1),
            rotation: Interval::symmetric(0.1),
            translation: Interval::symmetric(16.0),
            perspective: Interval::symmetric(1e-4),
        }
    }
}

impl PerturbationRanges {
    /// Every factor fixed at its neutral value.
    pub fn neutral() -> Self {
        Self {
            scaling: Interval::point(1.0),
            shearing: Interval::point(0.0),
            rotation: Interval::point(0.0),
            translation: Interval::point(0.0),
            perspective: Interval::point(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("scaling", self.scaling),
            ("shearing", self.shearing),
            ("rotation", self.rotation),
            ("translation", self.translation),
            ("perspective", self.perspective),
        ];
        for (name, iv) in all {
            if !iv.is_valid() {
                return Err(Error::InvalidConfig(format!("{name} interval {iv:?} is empty or non-finite")));
            }
        }
        if self.scaling.lo <= 0.0 {
            return Err(Error::InvalidConfig("scaling must stay positive".into()));
        }
        let shear = self.shearing.lo.abs().max(self.shearing.hi.abs());
        if shear >= 1.0 {
            return Err(Error::InvalidConfig("shear magnitude must stay below 1".into()));
        }
        let persp = self.perspective.lo.abs().max(self.perspective.hi.abs());
        if persp >= 1e-2 {
            return Err(Error::InvalidConfig("perspective magnitude must stay below 1e-2".into()));
        }
        Ok(())
    }

    /// Draws one homography from `rng`; see [`sample_gt`].
    pub fn sample_with<R: Rng + ?Sized>(&self, frame: Frame, rng: &mut R) -> Homography {
        let s = self.scaling.sample(rng);
        let shx = self.shearing.sample(rng);
        let shy = self.shearing.sample(rng);
        let theta = self.rotation.sample(rng);
        let px = self.perspective.sample(rng);
        let py = self.perspective.sample(rng);
        let tx = self.translation.sample(rng);
        let ty = self.translation.sample(rng);

        let scale = Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0);
        let shear = Matrix3::new(1.0, shx, 0.0, shy, 1.0, 0.0, 0.0, 0.0, 1.0);
        let (sin, cos) = theta.sin_cos();
        let rot = Matrix3::new(cos, -sin, 0.0, sin, cos, 0.0, 0.0, 0.0, 1.0);
        let persp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
        let trans = Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0);
        let c = frame.center();
        let to_center = Matrix3::new(1.0, 0.0, -c.x, 0.0, 1.0, -c.y, 0.0, 0.0, 1.0);
        let from_center = Matrix3::new(1.0, 0.0, c.x, 0.0, 1.0, c.y, 0.0, 0.0, 1.0);
        Homography::from_matrix_unchecked(
            from_center * trans * persp * rot * shear * scale * to_center,
        )
    }
}

/// Samples a ground-truth homography about the center of `frame`.
///
/// Factor order (first applied first): scale, shear, rotation, perspective,
/// translation. A pure function of `(ranges, frame, seed)`.
pub fn sample_gt(ranges: &PerturbationRanges, frame: Frame, seed: u64) -> Result<Homography> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ranges.sample_with(frame, &mut rng))
}

/// Largest corner displacement of `h` over `frame`, in pixels.
pub fn max_corner_displacement(h: &Homography, frame: Frame) -> Result<f64> {
    let d = homography_to_offsets(h, frame)?;
    Ok((0..4)
        .map(|k| {
            let (dx, dy) = d.corner(k);
            dx.hypot(dy)
        })
        .fold(0.0, f64::max))
}
