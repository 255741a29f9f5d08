//! Synthetic driving scenes: a curved road corridor with lane dividers,
//! pedestrian crossings and boundaries, opaque occluder segments, and vehicle
//! trajectories that revisit the corridor at widely separated epochs.
//!
//! Observations are deterministic: ground-truth polylines are resampled at
//! the raster resolution, each sample gets a distance/occlusion uncertainty,
//! and points that are too uncertain are dropped before rasterization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{
    dist, resample_polyline, BevGridSpec, BevRaster, ElementClass, MapElement, Pose2, VehicleId,
};

/// Maximum ego-to-helper distance for association (meters, inclusive).
pub const HELPER_RADIUS: f64 = 60.0;

/// Minimum time separation between ego and helper frames (seconds,
/// inclusive).
pub const MIN_TIME_SEPARATION: f64 = 1800.0;

/// Semantic raster layout: one confidence channel per element class plus a
/// sensing-validity channel.
pub const CLASS_CHANNEL_COUNT: usize = 3;
pub const VALIDITY_CHANNEL: usize = 3;
pub const OBS_CHANNELS: usize = 4;

// ── Scenario configuration ──────────────────────────────────────────────────

/// Scene synthesis knobs, readable from a plain-text `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub dividers: usize,
    pub crossings: usize,
    pub boundaries: usize,
    pub occluders_min: usize,
    pub occluders_max: usize,
    pub trajectories: usize,
    pub frame_rate: f64,
    pub duration: f64,
    pub lane_width: f64,
    pub road_length: f64,
    pub epoch_gap: f64,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            dividers: 3,
            crossings: 2,
            boundaries: 2,
            occluders_min: 2,
            occluders_max: 6,
            trajectories: 9,
            frame_rate: 2.0,
            duration: 8.0,
            lane_width: 3.5,
            road_length: 260.0,
            epoch_gap: 1900.0,
            speed_min: 7.0,
            speed_max: 9.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dividers + self.crossings + self.boundaries == 0 {
            return Err(Error::InvalidConfig(
                "scene would contain no map elements".into(),
            ));
        }
        if self.boundaries > 2 {
            return Err(Error::InvalidConfig(format!(
                "at most 2 boundaries supported, got {}",
                self.boundaries
            )));
        }
        if self.trajectories == 0 {
            return Err(Error::InvalidConfig("need at least one trajectory".into()));
        }
        if self.occluders_min > self.occluders_max {
            return Err(Error::InvalidConfig(format!(
                "occluders_min {} exceeds occluders_max {}",
                self.occluders_min, self.occluders_max
            )));
        }
        for (v, name) in [
            (self.frame_rate, "frame_rate"),
            (self.duration, "duration"),
            (self.lane_width, "lane_width"),
            (self.road_length, "road_length"),
            (self.speed_min, "speed_min"),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.speed_max < self.speed_min {
            return Err(Error::InvalidConfig("speed_max below speed_min".into()));
        }
        if self.epoch_gap < MIN_TIME_SEPARATION + self.duration {
            return Err(Error::InvalidConfig(format!(
                "epoch_gap {} too small to separate trajectories by {} s",
                self.epoch_gap, MIN_TIME_SEPARATION
            )));
        }
        let needed = 40.0 + 1.5 * self.speed_max * self.duration + 20.0;
        if self.road_length < needed {
            return Err(Error::InvalidConfig(format!(
                "road_length {} too short; need at least {needed}",
                self.road_length
            )));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected, missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ScenarioConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |e: &dyn std::fmt::Display| {
                Error::InvalidConfig(format!("line {}: {key}: {e}", lineno + 1))
            };
            macro_rules! set {
                ($field:ident, $ty:ty) => {
                    cfg.$field = value.parse::<$ty>().map_err(|e| bad(&e))?
                };
            }
            match key {
                "dividers" => set!(dividers, usize),
                "crossings" => set!(crossings, usize),
                "boundaries" => set!(boundaries, usize),
                "occluders_min" => set!(occluders_min, usize),
                "occluders_max" => set!(occluders_max, usize),
                "trajectories" => set!(trajectories, usize),
                "frame_rate" => set!(frame_rate, f64),
                "duration" => set!(duration, f64),
                "lane_width" => set!(lane_width, f64),
                "road_length" => set!(road_length, f64),
                "epoch_gap" => set!(epoch_gap, f64),
                "speed_min" => set!(speed_min, f64),
                "speed_max" => set!(speed_max, f64),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "line {}: unknown key {other}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "dividers = {}\ncrossings = {}\nboundaries = {}\noccluders_min = {}\noccluders_max = {}\ntrajectories = {}\nframe_rate = {}\nduration = {}\nlane_width = {}\nroad_length = {}\nepoch_gap = {}\nspeed_min = {}\nspeed_max = {}\n",
            self.dividers,
            self.crossings,
            self.boundaries,
            self.occluders_min,
            self.occluders_max,
            self.trajectories,
            self.frame_rate,
            self.duration,
            self.lane_width,
            self.road_length,
            self.epoch_gap,
            self.speed_min,
            self.speed_max,
        )
    }
}

// ── Scene types ─────────────────────────────────────────────────────────────

/// Opaque occluding wall segment in the global frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

/// Poses of one vehicle over its run, in temporal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub vehicle_id: VehicleId,
    pub frames: Vec<Pose2>,
}

/// Global-frame scene: ground-truth elements, occluders, and trajectory logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub elements: Vec<MapElement>,
    pub occluders: Vec<Occluder>,
    pub trajectories: Vec<TrajectoryLog>,
}

impl Scene {
    pub fn trajectory(&self, vehicle_id: VehicleId) -> Option<&TrajectoryLog> {
        self.trajectories.iter().find(|t| t.vehicle_id == vehicle_id)
    }
}

// ── Road path ───────────────────────────────────────────────────────────────

/// Densely sampled road centerline with unwrapped headings, used to lay out
/// elements and trajectories by arc length.
struct RoadPath {
    pts: Vec<(f64, f64)>,
    headings: Vec<f64>,
    step: f64,
}

impl RoadPath {
    fn generate(length: f64, rng: &mut ChaCha8Rng) -> RoadPath {
        let step = 1.0;
        let mut pts = vec![(0.0, 0.0)];
        let mut headings = vec![0.0f64];
        let mut theta = 0.0f64;
        let mut pos = (0.0, 0.0);
        let mut total = 0.0;
        let mut straight = true;
        while total < length {
            let (seg_len, curvature) = if straight {
                (rng.gen_range(25.0..50.0), 0.0)
            } else {
                let radius = rng.gen_range(60.0..150.0);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let sweep = rng.gen_range(0.10..0.35);
                (radius * sweep, sign / radius)
            };
            straight = !straight;
            let mut s = 0.0;
            while s < seg_len && total < length {
                theta += curvature * step;
                pos = (pos.0 + theta.cos() * step, pos.1 + theta.sin() * step);
                pts.push(pos);
                headings.push(theta);
                s += step;
                total += step;
            }
        }
        RoadPath {
            pts,
            headings,
            step,
        }
    }

    fn sample(&self, s: f64) -> ((f64, f64), f64) {
        let fidx = (s / self.step).clamp(0.0, (self.pts.len() - 1) as f64);
        let i = fidx.floor() as usize;
        if i + 1 >= self.pts.len() {
            return (self.pts[i], self.headings[i]);
        }
        let f = fidx - i as f64;
        let p = (
            self.pts[i].0 + f * (self.pts[i + 1].0 - self.pts[i].0),
            self.pts[i].1 + f * (self.pts[i + 1].1 - self.pts[i].1),
        );
        let h = self.headings[i] + f * (self.headings[i + 1] - self.headings[i]);
        (p, h)
    }

    /// Point at arc length `s`, laterally offset along the left normal.
    fn offset_point(&self, s: f64, offset: f64) -> (f64, f64) {
        let ((x, y), h) = self.sample(s);
        (x - h.sin() * offset, y + h.cos() * offset)
    }
}

// ── Scene generation ────────────────────────────────────────────────────────

/// Deterministically synthesizes a scene from a config and seed: identical
/// inputs reproduce the scene exactly.
pub fn generate_scene(cfg: &ScenarioConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = RoadPath::generate(cfg.road_length, &mut rng);

    // Dividers centered on the corridor, boundaries one lane beyond them.
    let divider_offsets: Vec<f64> = (0..cfg.dividers)
        .map(|i| (i as f64 - (cfg.dividers as f64 - 1.0) / 2.0) * cfg.lane_width)
        .collect();
    let half_width = divider_offsets
        .last()
        .map(|&o| o + cfg.lane_width)
        .unwrap_or(1.5 * cfg.lane_width);

    let mut elements = Vec::new();
    let polyline_at = |offset: f64| -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        let mut s = 0.0;
        while s <= cfg.road_length {
            pts.push(path.offset_point(s, offset));
            s += 2.0;
        }
        pts
    };
    for &o in &divider_offsets {
        elements.push(MapElement::new(ElementClass::Divider, polyline_at(o), 1.0)?);
    }
    for side in 0..cfg.boundaries {
        let o = if side == 0 { half_width } else { -half_width };
        elements.push(MapElement::new(ElementClass::Boundary, polyline_at(o), 1.0)?);
    }
    for c in 0..cfg.crossings {
        let base = cfg.road_length * (c as f64 + 1.0) / (cfg.crossings as f64 + 1.0);
        let s = base + rng.gen_range(-8.0..8.0);
        let reach = half_width + 0.5;
        let pts: Vec<(f64, f64)> = (0..5)
            .map(|k| path.offset_point(s, -reach + 2.0 * reach * k as f64 / 4.0))
            .collect();
        elements.push(MapElement::new(ElementClass::PedCrossing, pts, 1.0)?);
    }

    // Occluders: walls parallel to the road, half on-road (barriers) and half
    // at the roadside (building edges).
    let n_occluders = rng.gen_range(cfg.occluders_min..=cfg.occluders_max);
    let mut occluders = Vec::with_capacity(n_occluders);
    for _ in 0..n_occluders {
        let s = rng.gen_range(0.12 * cfg.road_length..0.88 * cfg.road_length);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = if rng.gen_bool(0.5) {
            rng.gen_range(1.2..(half_width - 0.5).max(1.3))
        } else {
            rng.gen_range(half_width + 0.5..half_width + 4.0)
        };
        let len = rng.gen_range(4.0..12.0);
        occluders.push(Occluder {
            a: path.offset_point(s - len / 2.0, side * lateral),
            b: path.offset_point(s + len / 2.0, side * lateral),
        });
    }

    // Lane centers between adjacent offsets (boundaries included).
    let mut rails: Vec<f64> = divider_offsets.clone();
    rails.push(half_width);
    rails.insert(0, -half_width);
    let lane_centers: Vec<f64> = rails.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();

    let n_frames = (cfg.duration * cfg.frame_rate).floor() as usize + 1;
    let ego_speed = rng.gen_range(cfg.speed_min..cfg.speed_max);
    let s_mid = 40.0 + ego_speed * cfg.duration / 2.0;
    let mut trajectories = Vec::with_capacity(cfg.trajectories);
    for m in 0..cfg.trajectories {
        let lane = lane_centers[m % lane_centers.len()];
        let speed = if m == 0 {
            ego_speed
        } else {
            rng.gen_range(cfg.speed_min..cfg.speed_max)
        };
        // Every vehicle passes the ego's mid-run station at some point of its
        // own run, so helper frames populate the corridor around it.
        let through = if m == 0 {
            0.5
        } else {
            rng.gen_range(0.2..0.8)
        };
        let s0 = (s_mid - speed * cfg.duration * through).max(0.0);
        let epoch = m as f64 * cfg.epoch_gap;
        let mut frames = Vec::with_capacity(n_frames);
        for i in 0..n_frames {
            let dt = i as f64 / cfg.frame_rate;
            let s = s0 + speed * dt;
            let lateral = lane + rng.gen_range(-0.15..0.15);
            let (p, h) = (path.offset_point(s, lateral), path.sample(s).1);
            let yaw = h - std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.01..0.01);
            frames.push(Pose2::new(p.0, p.1, yaw, epoch + dt));
        }
        trajectories.push(TrajectoryLog {
            vehicle_id: m as VehicleId,
            frames,
        });
    }

    Ok(Scene {
        elements,
        occluders,
        trajectories,
    })
}

// ── Observation model ───────────────────────────────────────────────────────

/// Distance/occlusion sensing surrogate. `num_cameras` only partitions the
/// field of view into angular sectors for bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub max_range: f64,
    pub num_cameras: usize,
    /// Distance weight in the point uncertainty.
    pub dist_weight: f64,
    /// Occlusion weight in the point uncertainty.
    pub occlusion_weight: f64,
    /// Points with uncertainty at or above this are dropped.
    pub drop_threshold: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            max_range: 60.0,
            num_cameras: 6,
            dist_weight: 0.5,
            occlusion_weight: 1.0,
            drop_threshold: 0.9,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_range.is_finite() && self.max_range > 0.0) {
            return Err(Error::InvalidParameter("max_range must be positive".into()));
        }
        if self.num_cameras == 0 {
            return Err(Error::InvalidParameter("need at least one camera".into()));
        }
        if self.dist_weight < 0.0 || self.occlusion_weight < 0.0 {
            return Err(Error::InvalidParameter(
                "uncertainty weights must be non-negative".into(),
            ));
        }
        if !(self.drop_threshold > 0.0 && self.drop_threshold <= 1.0) {
            return Err(Error::InvalidParameter(
                "drop_threshold must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// `min(1, a * dist / max_range + b * occluded)`.
    pub fn point_uncertainty(&self, distance: f64, occluded: bool) -> f64 {
        let occ = if occluded { 1.0 } else { 0.0 };
        (self.dist_weight * distance / self.max_range + self.occlusion_weight * occ).min(1.0)
    }

    /// Angular sector of a vehicle-frame point, counted counterclockwise
    /// from directly behind; forward (+y) falls in the middle sector.
    pub fn camera_sector(&self, p: (f64, f64)) -> usize {
        let azimuth = f64::atan2(p.0, p.1); // 0 = forward, clockwise positive
        let frac = (azimuth + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
        ((frac * self.num_cameras as f64) as usize).min(self.num_cameras - 1)
    }
}

/// One surviving ground-truth sample in the observing vehicle's frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservedPoint {
    pub element_id: usize,
    pub point_index: usize,
    pub x: f64,
    pub y: f64,
    pub uncertainty: f64,
}

/// Deterministic per-vehicle observation: surviving points plus the
/// class-confidence raster with its validity channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub vehicle_id: VehicleId,
    pub pose: Pose2,
    pub points: Vec<ObservedPoint>,
    pub semantic: BevRaster,
}

impl Observation {
    /// Point list in the shape the uncertainty rasterizer consumes.
    pub fn uncertainty_points(&self) -> Vec<((f64, f64), f64)> {
        self.points
            .iter()
            .map(|p| ((p.x, p.y), p.uncertainty))
            .collect()
    }
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// True when segments `p1p2` and `q1q2` intersect, touching included.
pub fn segments_intersect(
    p1: (f64, f64),
    p2: (f64, f64),
    q1: (f64, f64),
    q2: (f64, f64),
) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Observes the scene from a pose: resamples every element at the raster
/// resolution, scores each sample's uncertainty from range and occlusion,
/// drops samples at or above the drop threshold, and rasterizes the
/// survivors' confidences (`1 - u`, max per cell) into class channels. The
/// validity channel marks cells within sensing range.
pub fn observe(
    scene: &Scene,
    vehicle_id: VehicleId,
    pose: &Pose2,
    sm: &SensorModel,
    spec: &BevGridSpec,
) -> Result<Observation> {
    sm.validate()?;
    let origin = pose.position();
    let to_local = pose.inverse();
    let mut points = Vec::new();
    let mut semantic = BevRaster::zeros(*spec, OBS_CHANNELS);
    for (element_id, element) in scene.elements.iter().enumerate() {
        let samples = resample_polyline(&element.points, spec.resolution);
        for (point_index, &p_global) in samples.iter().enumerate() {
            let distance = dist(origin, p_global);
            if distance > sm.max_range {
                continue;
            }
            let occluded = scene
                .occluders
                .iter()
                .any(|o| segments_intersect(origin, p_global, o.a, o.b));
            let u = sm.point_uncertainty(distance, occluded);
            if u >= sm.drop_threshold {
                continue;
            }
            let (x, y) = to_local.transform_point(p_global);
            points.push(ObservedPoint {
                element_id,
                point_index,
                x,
                y,
                uncertainty: u,
            });
            if let Some((i, j)) = spec.cell_of(x, y) {
                let c = element.cls.index();
                let conf = 1.0 - u;
                if conf > semantic.get(i, j, c) {
                    semantic.set(i, j, c, conf);
                }
            }
        }
    }
    for i in 0..spec.h() {
        for j in 0..spec.w() {
            let (cx, cy) = spec.cell_center(i, j);
            let in_range = (cx * cx + cy * cy).sqrt() <= sm.max_range;
            semantic.set(i, j, VALIDITY_CHANNEL, if in_range { 1.0 } else { 0.0 });
        }
    }
    Ok(Observation {
        vehicle_id,
        pose: *pose,
        points,
        semantic,
    })
}

// ── Helper association ──────────────────────────────────────────────────────

/// Frames eligible to help an ego frame. When no frame from another pass
/// qualifies, frames of the ego's own trajectory are returned instead and
/// `fallback` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFrames {
    pub frames: Vec<(VehicleId, Pose2)>,
    pub fallback: bool,
}

/// Association rule: a frame qualifies when it lies within
/// [`HELPER_RADIUS`] of the ego pose and is separated in time by at least
/// [`MIN_TIME_SEPARATION`] (both inclusive).
pub fn associate_helpers(
    trajectories: &[TrajectoryLog],
    ego_id: VehicleId,
    ego_pose: &Pose2,
) -> CandidateFrames {
    let mut frames = Vec::new();
    for traj in trajectories {
        for pose in &traj.frames {
            let close = ego_pose.distance_to(pose) <= HELPER_RADIUS;
            let separated = (pose.t - ego_pose.t).abs() >= MIN_TIME_SEPARATION;
            if close && separated {
                frames.push((traj.vehicle_id, *pose));
            }
        }
    }
    if !frames.is_empty() {
        return CandidateFrames {
            frames,
            fallback: false,
        };
    }
    let mut fallback_frames = Vec::new();
    if let Some(own) = trajectories.iter().find(|t| t.vehicle_id == ego_id) {
        for pose in &own.frames {
            let dt = (pose.t - ego_pose.t).abs();
            if dt > 0.0 && ego_pose.distance_to(pose) <= HELPER_RADIUS {
                fallback_frames.push((own.vehicle_id, *pose));
            }
        }
    }
    CandidateFrames {
        frames: fallback_frames,
        fallback: true,
    }
}

// ── Availability statistics ─────────────────────────────────────────────────

/// Helper availability across ego frames: for each cumulative radius, how
/// many ego frames have at least `k` distinct helper vehicles with a
/// qualifying frame inside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AvailabilityStats {
    pub radii: Vec<f64>,
    pub frames_total: usize,
    /// `counts[r][k - 1]` = ego frames with >= k helpers within `radii[r]`.
    pub counts: Vec<Vec<usize>>,
    pub fraction_with_helper: f64,
}

pub const AVAILABILITY_MAX_K: usize = 10;

pub fn helper_availability_stats(scenes: &[Scene]) -> AvailabilityStats {
    let radii: Vec<f64> = (1..=6).map(|r| r as f64 * 10.0).collect();
    let mut counts = vec![vec![0usize; AVAILABILITY_MAX_K]; radii.len()];
    let mut frames_total = 0usize;
    let mut with_helper = 0usize;
    for scene in scenes {
        for traj in &scene.trajectories {
            for ego_pose in &traj.frames {
                frames_total += 1;
                // Nearest qualifying frame distance per distinct helper.
                let mut nearest: Vec<f64> = Vec::new();
                for other in &scene.trajectories {
                    if other.vehicle_id == traj.vehicle_id {
                        continue;
                    }
                    let mut best = f64::INFINITY;
                    for pose in &other.frames {
                        if (pose.t - ego_pose.t).abs() >= MIN_TIME_SEPARATION {
                            best = best.min(ego_pose.distance_to(pose));
                        }
                    }
                    if best.is_finite() {
                        nearest.push(best);
                    }
                }
                for (r, &radius) in radii.iter().enumerate() {
                    let n = nearest.iter().filter(|&&d| d <= radius).count();
                    for k in 1..=AVAILABILITY_MAX_K {
                        if n >= k {
                            counts[r][k - 1] += 1;
                        }
                    }
                }
                if nearest.iter().any(|&d| d <= HELPER_RADIUS) {
                    with_helper += 1;
                }
            }
        }
    }
    let fraction_with_helper = if frames_total == 0 {
        0.0
    } else {
        with_helper as f64 / frames_total as f64
    };
    AvailabilityStats {
        radii,
        frames_total,
        counts,
        fraction_with_helper,
    }
}
