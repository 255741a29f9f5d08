//! Planar geometry foundation: SE(2) poses, vectorized map elements, BEV grid
//! rasters, raster warping between vehicle frames, and pose-noise injection.
//!
//! Conventions used throughout the crate: a vehicle frame has +y along the
//! direction of travel and +x to the right, so the default BEV extent of
//! [-15, 15] x [-30, 30] covers 30 m laterally and 60 m longitudinally.
//! Raster rows index x and columns index y; cell (0, 0) sits at the minimum
//! corner and cell centers are offset half a resolution from the extent edge.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type VehicleId = u32;

/// Minimum spacing between consecutive polyline points.
pub const MIN_POINT_SPACING: f64 = 1e-6;

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a.rem_euclid(two_pi);
    if r > PI {
        r -= two_pi;
    }
    r
}

// ── Poses ───────────────────────────────────────────────────────────────────

/// SE(2) pose with a timestamp in seconds. `yaw` is kept in (-pi, pi].
///
/// A pose maps local coordinates into its parent frame:
/// `p_parent = R(yaw) p_local + (x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub t: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64, t: f64) -> Self {
        Pose2 {
            x,
            y,
            yaw: normalize_angle(yaw),
            t,
        }
    }

    pub fn identity() -> Self {
        Pose2 {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
            t: 0.0,
        }
    }

    /// Composition `self ∘ other`. The timestamp is taken from `other`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2 {
            x: self.x + c * other.x - s * other.y,
            y: self.y + s * other.x + c * other.y,
            yaw: normalize_angle(self.yaw + other.yaw),
            t: other.t,
        }
    }

    /// Inverse element: `compose(p, inverse(p))` is the identity transform.
    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2 {
            x: -(c * self.x + s * self.y),
            y: s * self.x - c * self.y,
            yaw: normalize_angle(-self.yaw),
            t: self.t,
        }
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (
            self.x + c * p.0 - s * p.1,
            self.y + s * p.0 + c * p.1,
        )
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn distance_to(&self, other: &Pose2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

// ── Map elements ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementClass {
    Divider,
    PedCrossing,
    Boundary,
}

impl ElementClass {
    pub const ALL: [ElementClass; 3] = [
        ElementClass::Divider,
        ElementClass::PedCrossing,
        ElementClass::Boundary,
    ];

    pub fn index(self) -> usize {
        match self {
            ElementClass::Divider => 0,
            ElementClass::PedCrossing => 1,
            ElementClass::Boundary => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ElementClass::Divider => "divider",
            ElementClass::PedCrossing => "ped_crossing",
            ElementClass::Boundary => "boundary",
        }
    }
}

/// Ordered polyline with a class label and a confidence in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub cls: ElementClass,
    pub points: Vec<(f64, f64)>,
    pub confidence: f64,
}

impl MapElement {
    pub fn new(cls: ElementClass, points: Vec<(f64, f64)>, confidence: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "map element needs at least 2 points, got {}",
                points.len()
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidParameter(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        for w in points.windows(2) {
            let d = dist(w[0], w[1]);
            if !d.is_finite() || d <= MIN_POINT_SPACING {
                return Err(Error::InvalidParameter(format!(
                    "consecutive points closer than {MIN_POINT_SPACING}: {:?} {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(MapElement {
            cls,
            points,
            confidence,
        })
    }

    pub fn length(&self) -> f64 {
        polyline_length(&self.points)
    }
}

/// Re-expresses an element given in `src`'s frame in `dst`'s frame.
pub fn transform_element(e: &MapElement, src: &Pose2, dst: &Pose2) -> MapElement {
    let rel = dst.inverse().compose(src);
    MapElement {
        cls: e.cls,
        points: e
            .points
            .iter()
            .map(|&p| rel.transform_point(p))
            .collect(),
        confidence: e.confidence,
    }
}

// ── BEV grid ────────────────────────────────────────────────────────────────

/// Metric extent and resolution of a BEV raster. Both ranges must be integer
/// multiples of the resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
}

impl BevGridSpec {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), resolution: f64) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        for (lo, hi, name) in [(x_range.0, x_range.1, "x"), (y_range.0, y_range.1, "y")] {
            if hi <= lo {
                return Err(Error::InvalidParameter(format!(
                    "{name} range [{lo}, {hi}] is empty"
                )));
            }
            let n = (hi - lo) / resolution;
            if (n - n.round()).abs() > 1e-6 {
                return Err(Error::InvalidParameter(format!(
                    "{name} range [{lo}, {hi}] is not a multiple of resolution {resolution}"
                )));
            }
        }
        Ok(BevGridSpec {
            x_min: x_range.0,
            x_max: x_range.1,
            y_min: y_range.0,
            y_max: y_range.1,
            resolution,
        })
    }

    /// 30 m x 60 m extent at 0.5 m resolution: 60 rows by 120 columns.
    pub fn default_extent() -> Self {
        BevGridSpec {
            x_min: -15.0,
            x_max: 15.0,
            y_min: -30.0,
            y_max: 30.0,
            resolution: 0.5,
        }
    }

    pub fn h(&self) -> usize {
        ((self.x_max - self.x_min) / self.resolution).round() as usize
    }

    pub fn w(&self) -> usize {
        ((self.y_max - self.y_min) / self.resolution).round() as usize
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (i as f64 + 0.5) * self.resolution,
            self.y_min + (j as f64 + 0.5) * self.resolution,
        )
    }

    /// Continuous cell coordinates (row, col) such that integer values land on
    /// cell centers.
    pub fn cell_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.x_min) / self.resolution - 0.5,
            (y - self.y_min) / self.resolution - 0.5,
        )
    }

    /// Cell containing the point, if inside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.contains(x, y) {
            return None;
        }
        let i = (((x - self.x_min) / self.resolution) as usize).min(self.h() - 1);
        let j = (((y - self.y_min) / self.resolution) as usize).min(self.w() - 1);
        Some((i, j))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Dense H x W x C raster over a [`BevGridSpec`], row-major with the channel
/// index fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevRaster {
    pub spec: BevGridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl BevRaster {
    pub fn zeros(spec: BevGridSpec, channels: usize) -> Self {
        let n = spec.h() * spec.w() * channels;
        BevRaster {
            spec,
            channels,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(spec: BevGridSpec, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut r = BevRaster::zeros(spec, channels);
        for i in 0..spec.h() {
            for j in 0..spec.w() {
                for c in 0..channels {
                    let idx = r.idx(i, j, c);
                    r.data[idx] = f(i, j, c);
                }
            }
        }
        r
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.spec.w() + j) * self.channels + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.spec.w() + j) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        let idx = self.idx(i, j, c);
        self.data[idx] = v;
    }

    /// Bilinear sample at continuous cell coordinates with zero padding
    /// outside the cell-center lattice.
    pub fn sample_bilinear(&self, u: f64, v: f64, c: usize) -> f64 {
        let h = self.spec.h() as i64;
        let w = self.spec.w() as i64;
        let i0 = u.floor();
        let j0 = v.floor();
        let a = u - i0;
        let b = v - j0;
        let i0 = i0 as i64;
        let j0 = j0 as i64;
        let mut acc = 0.0;
        for (di, wi) in [(0i64, 1.0 - a), (1, a)] {
            let i = i0 + di;
            if i < 0 || i >= h || wi == 0.0 {
                continue;
            }
            for (dj, wj) in [(0i64, 1.0 - b), (1, b)] {
                let j = j0 + dj;
                if j < 0 || j >= w || wj == 0.0 {
                    continue;
                }
                acc += wi * wj * self.get(i as usize, j as usize, c);
            }
        }
        acc
    }

    /// Copies a subset of channels into a new raster.
    /// Stacks `other`'s channels after this raster's; grids must match.
    pub fn concat_channels(&self, other: &BevRaster) -> Result<BevRaster> {
        if self.spec != other.spec {
            return Err(Error::ShapeMismatch(
                "cannot concatenate rasters on different grids".into(),
            ));
        }
        let mut out = BevRaster::zeros(self.spec, self.channels + other.channels);
        for i in 0..self.spec.h() {
            for j in 0..self.spec.w() {
                for c in 0..self.channels {
                    out.set(i, j, c, self.get(i, j, c));
                }
                for c in 0..other.channels {
                    out.set(i, j, self.channels + c, other.get(i, j, c));
                }
            }
        }
        Ok(out)
    }

    pub fn select_channels(&self, channels: &[usize]) -> BevRaster {
        let mut out = BevRaster::zeros(self.spec, channels.len());
        for i in 0..self.spec.h() {
            for j in 0..self.spec.w() {
                for (k, &c) in channels.iter().enumerate() {
                    out.set(i, j, k, self.get(i, j, c));
                }
            }
        }
        out
    }
}

/// Resamples `r` (expressed in `src`'s frame) onto the same grid laid out in
/// `dst`'s frame. Samples are bilinear with zero padding; an extra validity
/// channel (index C) is appended holding 1.0 where the sample position fell
/// inside `r`'s extent and 0.0 elsewhere.
pub fn warp_raster(r: &BevRaster, src: &Pose2, dst: &Pose2) -> BevRaster {
    let spec = r.spec;
    let rel = src.inverse().compose(dst);
    let mut out = BevRaster::zeros(spec, r.channels + 1);
    for i in 0..spec.h() {
        for j in 0..spec.w() {
            let p = spec.cell_center(i, j);
            let (xs, ys) = rel.transform_point(p);
            let (u, v) = spec.cell_coords(xs, ys);
            for c in 0..r.channels {
                out.set(i, j, c, r.sample_bilinear(u, v, c));
            }
            let mask = if spec.contains(xs, ys) { 1.0 } else { 0.0 };
            out.set(i, j, r.channels, mask);
        }
    }
    out
}

/// Adds zero-mean Gaussian noise to the translation and rotation of a pose.
pub fn inject_pose_noise(
    pose: &Pose2,
    rot_std: f64,
    trans_std: f64,
    rng: &mut impl Rng,
) -> Result<Pose2> {
    for (v, name) in [(rot_std, "rot_std"), (trans_std, "trans_std")] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{name} must be non-negative, got {v}"
            )));
        }
    }
    let trans = Normal::new(0.0, trans_std)
        .map_err(|e| Error::InvalidParameter(format!("trans_std: {e}")))?;
    let rot = Normal::new(0.0, rot_std)
        .map_err(|e| Error::InvalidParameter(format!("rot_std: {e}")))?;
    let dx = trans.sample(rng);
    let dy = trans.sample(rng);
    let dyaw = rot.sample(rng);
    Ok(Pose2::new(pose.x + dx, pose.y + dy, pose.yaw + dyaw, pose.t))
}

// ── Clipping ────────────────────────────────────────────────────────────────

/// Liang-Barsky clip of one segment against the closed extent rectangle.
fn clip_segment(
    p: (f64, f64),
    q: (f64, f64),
    spec: &BevGridSpec,
) -> Option<((f64, f64), (f64, f64))> {
    let (dx, dy) = (q.0 - p.0, q.1 - p.1);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    // Each entry encodes the constraint den * t <= num.
    let checks = [
        (-dx, p.0 - spec.x_min),
        (dx, spec.x_max - p.0),
        (-dy, p.1 - spec.y_min),
        (dy, spec.y_max - p.1),
    ];
    for (den, num) in checks {
        if den > 0.0 {
            let r = num / den;
            if r < t0 {
                return None;
            }
            t1 = t1.min(r);
        } else if den < 0.0 {
            let r = num / den;
            if r > t1 {
                return None;
            }
            t0 = t0.max(r);
        } else if num < 0.0 {
            return None;
        }
    }
    if t0 > t1 {
        return None;
    }
    // Interpolated boundary points can overshoot the extent by an ulp; the
    // clamp keeps every emitted point inside it.
    let snap = |x: f64, y: f64| {
        (
            x.clamp(spec.x_min, spec.x_max),
            y.clamp(spec.y_min, spec.y_max),
        )
    };
    Some((snap(p.0 + t0 * dx, p.1 + t0 * dy), snap(p.0 + t1 * dx, p.1 + t1 * dy)))
}

/// Intersects polylines with the extent rectangle. Segments crossing the
/// boundary are cut at the intersection point; a polyline leaving and
/// re-entering the extent yields one output element per inside run. Runs
/// reduced below 2 points are dropped.
pub fn clip_to_range(elements: &[MapElement], spec: &BevGridSpec) -> Vec<MapElement> {
    let mut out = Vec::new();
    for e in elements {
        let mut run: Vec<(f64, f64)> = Vec::new();
        let flush = |run: &mut Vec<(f64, f64)>, out: &mut Vec<MapElement>| {
            if run.len() >= 2 {
                out.push(MapElement {
                    cls: e.cls,
                    points: std::mem::take(run),
                    confidence: e.confidence,
                });
            } else {
                run.clear();
            }
        };
        for w in e.points.windows(2) {
            match clip_segment(w[0], w[1], spec) {
                None => flush(&mut run, &mut out),
                Some((a, b)) => {
                    match run.last() {
                        Some(&last) if dist(last, a) <= MIN_POINT_SPACING => {}
                        Some(_) => {
                            // Re-entry at a different boundary point: new run.
                            flush(&mut run, &mut out);
                            run.push(a);
                        }
                        None => run.push(a),
                    }
                    if run
                        .last()
                        .map_or(true, |&last| dist(last, b) > MIN_POINT_SPACING)
                    {
                        run.push(b);
                    }
                }
            }
        }
        flush(&mut run, &mut out);
    }
    out
}

// ── Polyline utilities ──────────────────────────────────────────────────────

#[inline]
pub fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

pub fn polyline_length(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Point at arc length `s` along the polyline, clamped to its ends.
pub fn point_at_arc_length(points: &[(f64, f64)], s: f64) -> (f64, f64) {
    if s <= 0.0 {
        return points[0];
    }
    let mut remaining = s;
    for w in points.windows(2) {
        let d = dist(w[0], w[1]);
        if remaining <= d {
            let f = if d > 0.0 { remaining / d } else { 0.0 };
            return (
                w[0].0 + f * (w[1].0 - w[0].0),
                w[0].1 + f * (w[1].1 - w[0].1),
            );
        }
        remaining -= d;
    }
    *points.last().unwrap()
}

/// Samples along the polyline every `interval` meters of arc length,
/// starting at the first point; the final endpoint is always included.
pub fn resample_polyline(points: &[(f64, f64)], interval: f64) -> Vec<(f64, f64)> {
    let len = polyline_length(points);
    let mut out = Vec::new();
    let mut s = 0.0;
    while s < len {
        out.push(point_at_arc_length(points, s));
        s += interval;
    }
    out.push(*points.last().unwrap());
    out
}

/// Resamples the polyline to exactly `n` points uniformly spaced in arc
/// length, endpoints included.
pub fn resample_to_count(points: &[(f64, f64)], n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 2, "resample_to_count needs n >= 2");
    let len = polyline_length(points);
    (0..n)
        .map(|i| point_at_arc_length(points, len * i as f64 / (n - 1) as f64))
        .collect()
}

/// Distance from `p` to the segment `ab`.
pub fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let l2 = vx * vx + vy * vy;
    if l2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / l2).clamp(0.0, 1.0);
    dist(p, (a.0 + t * vx, a.1 + t * vy))
}

/// Douglas-Peucker simplification with tolerance `eps`.
pub fn douglas_peucker(points: &[(f64, f64)], eps: f64) -> Vec<(f64, f64)> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let (mut best, mut best_d) = (0, -1.0);
    let (a, b) = (points[0], *points.last().unwrap());
    for (k, &p) in points.iter().enumerate().skip(1).take(points.len() - 2) {
        let d = segment_distance(p, a, b);
        if d > best_d {
            best = k;
            best_d = d;
        }
    }
    if best_d > eps {
        let mut left = douglas_peucker(&points[..=best], eps);
        let right = douglas_peucker(&points[best..], eps);
        left.pop();
        left.extend(right);
        left
    } else {
        vec![a, b]
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn angle_wraps_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert_relative_eq!(normalize_angle(3.0 * PI), PI);
        assert_relative_eq!(normalize_angle(-0.5), -0.5);
        assert_relative_eq!(normalize_angle(2.0 * PI + 0.25), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn compose_quarter_turn() {
        let a = Pose2::new(1.0, 0.0, PI / 2.0, 0.0);
        let b = Pose2::new(1.0, 0.0, 0.0, 7.0);
        let c = a.compose(&b);
        assert_relative_eq!(c.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.yaw, PI / 2.0, epsilon = 1e-12);
        assert_eq!(c.t, 7.0);
    }

    #[test]
    fn compose_with_identity_is_noop() {
        let p = Pose2::new(3.0, -2.0, 0.7, 4.0);
        let q = Pose2::identity().compose(&p);
        assert_relative_eq!(q.x, p.x);
        assert_relative_eq!(q.y, p.y);
        assert_relative_eq!(q.yaw, p.yaw);
    }

    proptest! {
        #[test]
        fn inverse_composes_to_identity(
            x in -100.0..100.0f64,
            y in -100.0..100.0f64,
            yaw in -10.0..10.0f64,
        ) {
            let p = Pose2::new(x, y, yaw, 0.0);
            let id = p.compose(&p.inverse());
            prop_assert!(id.x.abs() < 1e-9);
            prop_assert!(id.y.abs() < 1e-9);
            prop_assert!(normalize_angle(id.yaw).abs() < 1e-9);
        }

        #[test]
        fn transform_element_round_trips(
            x in -50.0..50.0f64,
            y in -50.0..50.0f64,
            yaw in -3.0..3.0f64,
        ) {
            let e = MapElement::new(
                ElementClass::Divider,
                vec![(0.0, 0.0), (4.0, 1.0), (8.0, -2.0)],
                1.0,
            ).unwrap();
            let src = Pose2::new(x, y, yaw, 0.0);
            let dst = Pose2::new(-y, x, yaw * 0.5, 0.0);
            let there = transform_element(&e, &src, &dst);
            let back = transform_element(&there, &dst, &src);
            for (p, q) in e.points.iter().zip(back.points.iter()) {
                prop_assert!(dist(*p, *q) < 1e-9);
            }
        }

        #[test]
        fn clipped_points_stay_inside_extent(
            pts in proptest::collection::vec((-40.0..40.0f64, -40.0..40.0f64), 2..8)
        ) {
            let spec = BevGridSpec::default_extent();
            let deduped: Vec<(f64, f64)> = pts.iter().fold(Vec::new(), |mut acc, &p| {
                if acc.last().map_or(true, |&q| dist(p, q) > 1e-3) {
                    acc.push(p);
                }
                acc
            });
            prop_assume!(deduped.len() >= 2);
            let e = MapElement::new(ElementClass::Boundary, deduped, 0.5).unwrap();
            for c in clip_to_range(&[e], &spec) {
                for &(x, y) in &c.points {
                    prop_assert!(spec.contains(x, y));
                }
                prop_assert!(c.points.len() >= 2);
            }
        }
    }

    #[test]
    fn element_rejects_degenerate_input() {
        assert!(MapElement::new(ElementClass::Divider, vec![(0.0, 0.0)], 1.0).is_err());
        assert!(MapElement::new(
            ElementClass::Divider,
            vec![(0.0, 0.0), (0.0, 0.0)],
            1.0
        )
        .is_err());
        assert!(MapElement::new(
            ElementClass::Divider,
            vec![(0.0, 0.0), (1.0, 0.0)],
            1.5
        )
        .is_err());
    }

    #[test]
    fn transform_between_equal_frames_is_identity() {
        let e = MapElement::new(
            ElementClass::PedCrossing,
            vec![(1.0, 2.0), (3.0, 4.0)],
            0.8,
        )
        .unwrap();
        let p = Pose2::new(5.0, -1.0, 1.2, 0.0);
        let out = transform_element(&e, &p, &p);
        for (a, b) in e.points.iter().zip(out.points.iter()) {
            assert!(dist(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn default_grid_is_60_by_120() {
        let spec = BevGridSpec::default_extent();
        assert_eq!(spec.h(), 60);
        assert_eq!(spec.w(), 120);
        let (x, y) = spec.cell_center(0, 0);
        assert_relative_eq!(x, -14.75);
        assert_relative_eq!(y, -29.75);
    }

    #[test]
    fn grid_rejects_non_multiple_extent() {
        assert!(BevGridSpec::new((-1.0, 1.0), (-1.0, 1.05), 0.5).is_err());
        assert!(BevGridSpec::new((-1.0, 1.0), (-1.0, 1.0), -0.5).is_err());
        assert!(BevGridSpec::new((1.0, -1.0), (-1.0, 1.0), 0.5).is_err());
    }

    fn checkerboard(spec: BevGridSpec, channels: usize) -> BevRaster {
        BevRaster::from_fn(spec, channels, |i, j, c| {
            ((i * 7 + j * 3 + c * 11) % 13) as f64 / 13.0
        })
    }

    #[test]
    fn warp_identity_reproduces_raster() {
        let spec = BevGridSpec::default_extent();
        let r = checkerboard(spec, 2);
        let p = Pose2::new(4.0, -3.0, 0.9, 0.0);
        let out = warp_raster(&r, &p, &p);
        assert_eq!(out.channels, 3);
        for i in 0..spec.h() {
            for j in 0..spec.w() {
                for c in 0..2 {
                    assert_relative_eq!(out.get(i, j, c), r.get(i, j, c), epsilon = 1e-9);
                }
                assert_eq!(out.get(i, j, 2), 1.0);
            }
        }
    }

    #[test]
    fn warp_half_turn_is_point_symmetry() {
        let spec = BevGridSpec::default_extent();
        let r = checkerboard(spec, 1);
        let src = Pose2::identity();
        let dst = Pose2::new(0.0, 0.0, PI, 0.0);
        let out = warp_raster(&r, &src, &dst);
        let (h, w) = (spec.h(), spec.w());
        for i in 0..h {
            for j in 0..w {
                assert_relative_eq!(
                    out.get(i, j, 0),
                    r.get(h - 1 - i, w - 1 - j, 0),
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn warp_marks_out_of_extent_cells_invalid() {
        let spec = BevGridSpec::default_extent();
        let r = checkerboard(spec, 1);
        // Destination displaced far beyond the extent: nothing overlaps.
        let out = warp_raster(&r, &Pose2::identity(), &Pose2::new(500.0, 0.0, 0.0, 0.0));
        for i in 0..spec.h() {
            for j in 0..spec.w() {
                assert_eq!(out.get(i, j, 0), 0.0);
                assert_eq!(out.get(i, j, 1), 0.0);
            }
        }
    }

    #[test]
    fn warp_is_linear_in_raster_data() {
        let spec = BevGridSpec::new((-2.0, 2.0), (-3.0, 3.0), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = BevRaster::from_fn(spec, 2, |_, _, _| rng.gen::<f64>());
            let b = BevRaster::from_fn(spec, 2, |_, _, _| rng.gen::<f64>());
            let src = Pose2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-3.0..3.0), 0.0);
            let dst = Pose2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-3.0..3.0), 0.0);
            let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let mixed = BevRaster {
                spec,
                channels: 2,
                data: a
                    .data
                    .iter()
                    .zip(b.data.iter())
                    .map(|(&x, &y)| alpha * x + beta * y)
                    .collect(),
            };
            let wa = warp_raster(&a, &src, &dst);
            let wb = warp_raster(&b, &src, &dst);
            let wm = warp_raster(&mixed, &src, &dst);
            for i in 0..spec.h() {
                for j in 0..spec.w() {
                    for c in 0..2 {
                        let want = alpha * wa.get(i, j, c) + beta * wb.get(i, j, c);
                        assert!((wm.get(i, j, c) - want).abs() < 1e-9);
                    }
                    assert_eq!(wm.get(i, j, 2), wa.get(i, j, 2));
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_error_bounded_by_gradient() {
        // Shift by half a cell and back; compare against the interpolation
        // error bound max|∇f| * resolution computed from adjacent differences.
        let spec = BevGridSpec::default_extent();
        let r = BevRaster::from_fn(spec, 1, |i, j, _| {
            ((i as f64 * 0.31).sin() + (j as f64 * 0.17).cos()) * 0.5 + 0.5
        });
        let src = Pose2::identity();
        let dst = Pose2::new(spec.resolution / 2.0, 0.0, 0.0, 0.0);
        let there = warp_raster(&r, &src, &dst);
        let there_data = there.select_channels(&[0]);
        let back = warp_raster(&there_data, &dst, &src);

        let mut max_adjacent_diff = 0.0f64;
        for i in 0..spec.h() {
            for j in 0..spec.w() {
                if i + 1 < spec.h() {
                    max_adjacent_diff =
                        max_adjacent_diff.max((r.get(i + 1, j, 0) - r.get(i, j, 0)).abs());
                }
                if j + 1 < spec.w() {
                    max_adjacent_diff =
                        max_adjacent_diff.max((r.get(i, j + 1, 0) - r.get(i, j, 0)).abs());
                }
            }
        }
        // Interior cells only: one cell at each border fades through padding.
        for i in 2..spec.h() - 2 {
            for j in 2..spec.w() - 2 {
                let err = (back.get(i, j, 0) - r.get(i, j, 0)).abs();
                assert!(
                    err <= max_adjacent_diff + 1e-12,
                    "cell ({i}, {j}): err {err} > bound {max_adjacent_diff}"
                );
            }
        }
    }

    #[test]
    fn pose_noise_zero_std_returns_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Pose2::new(1.0, 2.0, 0.3, 9.0);
        let q = inject_pose_noise(&p, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn pose_noise_rejects_negative_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Pose2::identity();
        assert!(inject_pose_noise(&p, -0.1, 0.0, &mut rng).is_err());
        assert!(inject_pose_noise(&p, 0.0, -0.1, &mut rng).is_err());
    }

    #[test]
    fn pose_noise_matches_requested_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = Pose2::identity();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let q = inject_pose_noise(&p, 0.0, 0.5, &mut rng).unwrap();
            sum += q.x;
            sum_sq += q.x * q.x;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!(
            (std - 0.5).abs() < 0.5 * 0.02,
            "empirical std {std} departs from 0.5 by more than 2%"
        );
    }

    #[test]
    fn clip_keeps_interior_cuts_crossings_drops_outside() {
        let spec = BevGridSpec::default_extent();
        let inside = MapElement::new(
            ElementClass::Divider,
            vec![(0.0, -10.0), (0.0, 10.0)],
            1.0,
        )
        .unwrap();
        let crossing = MapElement::new(
            ElementClass::Divider,
            vec![(0.0, -40.0), (0.0, 40.0)],
            1.0,
        )
        .unwrap();
        let outside = MapElement::new(
            ElementClass::Divider,
            vec![(20.0, 0.0), (25.0, 0.0)],
            1.0,
        )
        .unwrap();

        let kept = clip_to_range(&[inside.clone()], &spec);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].points, inside.points);

        let cut = clip_to_range(&[crossing], &spec);
        assert_eq!(cut.len(), 1);
        assert_relative_eq!(cut[0].points[0].1, -30.0);
        assert_relative_eq!(cut[0].points.last().unwrap().1, 30.0);

        assert!(clip_to_range(&[outside], &spec).is_empty());
    }

    #[test]
    fn clip_splits_re_entering_polyline() {
        let spec = BevGridSpec::new((-1.0, 1.0), (-1.0, 1.0), 0.5).unwrap();
        let e = MapElement::new(
            ElementClass::Boundary,
            vec![(-0.5, 0.0), (2.0, 0.0), (2.0, 0.5), (0.5, 0.5)],
            1.0,
        )
        .unwrap();
        let parts = clip_to_range(&[e], &spec);
        assert_eq!(parts.len(), 2);
    }

    #[test]
    fn resample_straight_line_every_half_meter() {
        let pts = vec![(0.0, 0.0), (20.0, 0.0)];
        let s = resample_polyline(&pts, 0.5);
        assert_eq!(s.len(), 41);
        assert_relative_eq!(s[1].0, 0.5);
        assert_relative_eq!(s.last().unwrap().0, 20.0);
    }

    #[test]
    fn resample_to_count_is_uniform() {
        let pts = vec![(0.0, 0.0), (3.0, 4.0), (6.0, 8.0)];
        let s = resample_to_count(&pts, 11);
        assert_eq!(s.len(), 11);
        let step = polyline_length(&pts) / 10.0;
        for w in s.windows(2) {
            assert_relative_eq!(dist(w[0], w[1]), step, epsilon = 1e-9);
        }
    }

    #[test]
    fn douglas_peucker_collapses_collinear_keeps_corners() {
        let line: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 0.0)).collect();
        assert_eq!(douglas_peucker(&line, 0.1), vec![(0.0, 0.0), (9.0, 0.0)]);

        let corner = vec![(0.0, 0.0), (5.0, 0.0), (5.0, 5.0)];
        assert_eq!(douglas_peucker(&corner, 0.1).len(), 3);
    }
}
