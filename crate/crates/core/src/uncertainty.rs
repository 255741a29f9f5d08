//! Per-vehicle BEV uncertainty maps and region-based candidate partitioning.
//!
//! An uncertainty map holds, per cell, the mean point uncertainty of all
//! observed points within a neighborhood radius of the cell center, plus a
//! coverage flag distinguishing "no evidence" from "confident". Candidate
//! partitioning divides the ego extent into square regions and keeps the
//! nearest distinct vehicle per region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BevGridSpec, Pose2, VehicleId};

/// Neighborhood radius (meters) used when rasterizing point uncertainties.
pub const DEFAULT_NEIGHBORHOOD_RADIUS: f64 = 1.5;

/// Value reported for covered cells with no opinion; cells with no evidence
/// keep this default and `coverage = false`.
pub const EMPTY_CELL_DEFAULT: f64 = 0.0;

/// Per-cell mean point uncertainty over a BEV grid with a coverage mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMap {
    pub spec: BevGridSpec,
    pub values: Vec<f64>,
    pub coverage: Vec<bool>,
}

impl UncertaintyMap {
    pub fn empty(spec: BevGridSpec) -> Self {
        let n = spec.h() * spec.w();
        UncertaintyMap {
            spec,
            values: vec![EMPTY_CELL_DEFAULT; n],
            coverage: vec![false; n],
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.spec.w() + j
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.spec.w() + j]
    }

    #[inline]
    pub fn covered(&self, i: usize, j: usize) -> bool {
        self.coverage[i * self.spec.w() + j]
    }

    /// Uncertainty as seen by selection policies: cells without evidence are
    /// treated as maximally uncertain.
    #[inline]
    pub fn effective(&self, i: usize, j: usize) -> f64 {
        if self.covered(i, j) {
            self.value(i, j)
        } else {
            1.0
        }
    }

    /// Two-channel raster view (values, coverage) for feature encoders.
    pub fn to_raster(&self) -> crate::geom::BevRaster {
        let mut r = crate::geom::BevRaster::zeros(self.spec, 2);
        for i in 0..self.spec.h() {
            for j in 0..self.spec.w() {
                r.set(i, j, 0, self.value(i, j));
                r.set(i, j, 1, if self.covered(i, j) { 1.0 } else { 0.0 });
            }
        }
        r
    }
}

/// Rasterizes point uncertainties: each cell averages the uncertainties of
/// all points within distance `d` of its center. Points must already be in
/// the map's frame.
pub fn rasterize_uncertainty(
    points: &[((f64, f64), f64)],
    spec: &BevGridSpec,
    d: f64,
) -> Result<UncertaintyMap> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "neighborhood radius must be positive, got {d}"
        )));
    }
    for &(_, u) in points {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::InvalidParameter(format!(
                "point uncertainty {u} outside [0, 1]"
            )));
        }
    }
    let (h, w) = (spec.h(), spec.w());
    let mut sums = vec![0.0f64; h * w];
    let mut counts = vec![0u32; h * w];
    let res = spec.resolution;
    let d2 = d * d;
    // For each point, visit only the cell window its radius can reach.
    for &((x, y), u) in points {
        let i_lo = ((x - d - spec.x_min) / res - 0.5).ceil().max(0.0) as usize;
        let i_hi = ((x + d - spec.x_min) / res - 0.5).floor().min(h as f64 - 1.0);
        let j_lo = ((y - d - spec.y_min) / res - 0.5).ceil().max(0.0) as usize;
        let j_hi = ((y + d - spec.y_min) / res - 0.5).floor().min(w as f64 - 1.0);
        if i_hi < 0.0 || j_hi < 0.0 {
            continue;
        }
        for i in i_lo..=i_hi as usize {
            for j in j_lo..=j_hi as usize {
                let (cx, cy) = spec.cell_center(i, j);
                let dx = x - cx;
                let dy = y - cy;
                if dx * dx + dy * dy <= d2 {
                    sums[i * w + j] += u;
                    counts[i * w + j] += 1;
                }
            }
        }
    }
    let mut map = UncertaintyMap::empty(*spec);
    for k in 0..h * w {
        if counts[k] > 0 {
            map.values[k] = sums[k] / counts[k] as f64;
            map.coverage[k] = true;
        }
    }
    Ok(map)
}

// ── Candidate partitioning ──────────────────────────────────────────────────

/// One selectable helper: its id, the pose of the frame that represents it,
/// its uncertainty map (in its own frame), and the extent region it was
/// assigned to.
#[derive(Debug, Clone)]
pub struct CandidateEntry {
    pub id: VehicleId,
    pub pose: Pose2,
    pub map: UncertaintyMap,
    pub region_index: usize,
}

/// Ego context plus at most `n_h * n_w` distinct candidates.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub ego_id: VehicleId,
    pub ego_pose: Pose2,
    pub ego_map: UncertaintyMap,
    pub candidates: Vec<CandidateEntry>,
}

impl CandidateSet {
    pub fn ids(&self) -> Vec<VehicleId> {
        self.candidates.iter().map(|c| c.id).collect()
    }

    pub fn entry(&self, id: VehicleId) -> Option<&CandidateEntry> {
        self.candidates.iter().find(|c| c.id == id)
    }
}

/// Centers of the `n_h x n_w` square regions tiling the extent, indexed
/// row-major (`region = a * n_w + b`).
pub fn region_centers(spec: &BevGridSpec, n_h: usize, n_w: usize) -> Result<Vec<(f64, f64)>> {
    if n_h == 0 || n_w == 0 {
        return Err(Error::InvalidParameter("region counts must be >= 1".into()));
    }
    let rx = (spec.x_max - spec.x_min) / n_h as f64;
    let ry = (spec.y_max - spec.y_min) / n_w as f64;
    if (rx - ry).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "regions must be square: {rx} x {ry}"
        )));
    }
    let mut centers = Vec::with_capacity(n_h * n_w);
    for a in 0..n_h {
        for b in 0..n_w {
            centers.push((
                spec.x_min + (a as f64 + 0.5) * rx,
                spec.y_min + (b as f64 + 0.5) * ry,
            ));
        }
    }
    Ok(centers)
}

/// Assigns at most one vehicle per region: globally nearest (vehicle, region)
/// pairs win first, each vehicle is used once, and remaining regions take the
/// next-nearest unused vehicle or stay empty. Entries sharing an id are
/// alternative poses of one vehicle; distance to a region is the minimum over
/// its poses and the winning pose is recorded per assignment. Ties break
/// toward the lower vehicle id, then the lower region index.
pub fn assign_regions(
    ego_pose: &Pose2,
    others: &[(VehicleId, Pose2)],
    spec: &BevGridSpec,
    n_h: usize,
    n_w: usize,
) -> Result<Vec<(VehicleId, Pose2, usize)>> {
    let centers = region_centers(spec, n_h, n_w)?;
    let to_ego = ego_pose.inverse();
    // Distance of each (vehicle, region) pair, keeping the best pose per pair.
    struct Claim {
        dist: f64,
        id: VehicleId,
        region: usize,
        pose: Pose2,
    }
    let mut claims: Vec<Claim> = Vec::new();
    let mut ids: Vec<VehicleId> = others.iter().map(|&(id, _)| id).collect();
    ids.sort_unstable();
    ids.dedup();
    for &id in &ids {
        for (region, &(cx, cy)) in centers.iter().enumerate() {
            let mut best: Option<(f64, Pose2)> = None;
            for &(_, pose) in others.iter().filter(|&&(vid, _)| vid == id) {
                let (x, y) = to_ego.compose(&pose).position();
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, pose));
                }
            }
            let (dist, pose) = best.unwrap();
            claims.push(Claim {
                dist,
                id,
                region,
                pose,
            });
        }
    }
    claims.sort_by(|a, b| {
        a.dist
            .partial_cmp(&b.dist)
            .unwrap()
            .then(a.id.cmp(&b.id))
            .then(a.region.cmp(&b.region))
    });
    let mut used_vehicle = std::collections::BTreeSet::new();
    let mut used_region = vec![false; centers.len()];
    let mut out = Vec::new();
    for c in &claims {
        if used_vehicle.contains(&c.id) || used_region[c.region] {
            continue;
        }
        used_vehicle.insert(c.id);
        used_region[c.region] = true;
        out.push((c.id, c.pose, c.region));
    }
    out.sort_by_key(|&(id, _, _)| id);
    Ok(out)
}

/// Builds the candidate set for an ego vehicle from qualifying helper frames
/// and their uncertainty maps.
pub fn partition_candidates(
    ego: (VehicleId, Pose2, UncertaintyMap),
    others: Vec<(VehicleId, Pose2, UncertaintyMap)>,
    spec: &BevGridSpec,
    n_h: usize,
    n_w: usize,
) -> Result<CandidateSet> {
    let poses: Vec<(VehicleId, Pose2)> = others.iter().map(|&(id, p, _)| (id, p)).collect();
    let assigned = assign_regions(&ego.1, &poses, spec, n_h, n_w)?;
    let mut candidates = Vec::with_capacity(assigned.len());
    for (id, pose, region_index) in assigned {
        // The map travels with the exact frame whose pose won the region.
        let map = others
            .iter()
            .find(|&&(vid, p, _)| vid == id && p == pose)
            .map(|(_, _, m)| m.clone())
            .expect("assigned pose came from the input list");
        candidates.push(CandidateEntry {
            id,
            pose,
            map,
            region_index,
        });
    }
    Ok(CandidateSet {
        ego_id: ego.0,
        ego_pose: ego.1,
        ego_map: ego.2,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec() -> BevGridSpec {
        BevGridSpec::default_extent()
    }

    #[test]
    fn empty_points_give_default_map() {
        let m = rasterize_uncertainty(&[], &spec(), 1.5).unwrap();
        assert!(m.values.iter().all(|&v| v == EMPTY_CELL_DEFAULT));
        assert!(m.coverage.iter().all(|&c| !c));
    }

    #[test]
    fn single_point_with_small_radius_marks_only_its_cell() {
        let s = spec();
        let center = s.cell_center(10, 20);
        let m = rasterize_uncertainty(&[(center, 0.6)], &s, 0.2).unwrap();
        for i in 0..s.h() {
            for j in 0..s.w() {
                if (i, j) == (10, 20) {
                    assert_relative_eq!(m.value(i, j), 0.6);
                    assert!(m.covered(i, j));
                } else {
                    assert!(!m.covered(i, j));
                }
            }
        }
    }

    #[test]
    fn overlapping_points_average() {
        let s = spec();
        let c = s.cell_center(5, 5);
        let m = rasterize_uncertainty(&[(c, 0.2), (c, 0.8)], &s, 0.3).unwrap();
        assert_relative_eq!(m.value(5, 5), 0.5);
    }

    #[test]
    fn rejects_bad_radius_and_uncertainty() {
        assert!(rasterize_uncertainty(&[], &spec(), 0.0).is_err());
        assert!(rasterize_uncertainty(&[((0.0, 0.0), 1.2)], &spec(), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn coverage_grows_with_radius(
            pts in proptest::collection::vec(((-14.0..14.0f64, -29.0..29.0f64), 0.0..1.0f64), 1..20),
            d_small in 0.3..1.0f64,
            extra in 0.1..2.0f64,
        ) {
            let s = spec();
            let small = rasterize_uncertainty(&pts, &s, d_small).unwrap();
            let large = rasterize_uncertainty(&pts, &s, d_small + extra).unwrap();
            for k in 0..small.coverage.len() {
                prop_assert!(!small.coverage[k] || large.coverage[k]);
            }
        }

        #[test]
        fn uniform_uncertainty_rasterizes_constant(
            u in 0.0..1.0f64,
            pts in proptest::collection::vec((-14.0..14.0f64, -29.0..29.0f64), 1..30),
        ) {
            let s = spec();
            let tagged: Vec<_> = pts.iter().map(|&p| (p, u)).collect();
            let m = rasterize_uncertainty(&tagged, &s, 1.5).unwrap();
            for k in 0..m.values.len() {
                if m.coverage[k] {
                    prop_assert!((m.values[k] - u).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn default_partition_has_eight_square_regions() {
        let centers = region_centers(&spec(), 2, 4).unwrap();
        assert_eq!(centers.len(), 8);
        assert_relative_eq!(centers[0].0, -7.5);
        assert_relative_eq!(centers[0].1, -22.5);
        assert_relative_eq!(centers[7].0, 7.5);
        assert_relative_eq!(centers[7].1, 22.5);
    }

    #[test]
    fn non_square_regions_rejected() {
        assert!(region_centers(&spec(), 4, 4).is_err());
        assert!(region_centers(&spec(), 0, 4).is_err());
    }

    #[test]
    fn vehicle_at_each_center_claims_its_region() {
        let s = spec();
        let ego = Pose2::identity();
        let centers = region_centers(&s, 2, 4).unwrap();
        let others: Vec<(VehicleId, Pose2)> = centers
            .iter()
            .enumerate()
            .map(|(k, &(x, y))| (k as VehicleId + 1, Pose2::new(x, y, 0.0, 0.0)))
            .collect();
        let assigned = assign_regions(&ego, &others, &s, 2, 4).unwrap();
        assert_eq!(assigned.len(), 8);
        for (k, &(id, _, region)) in assigned.iter().enumerate() {
            assert_eq!(id, k as VehicleId + 1);
            assert_eq!(region, k);
        }
    }

    #[test]
    fn single_vehicle_fills_one_region_only() {
        let s = spec();
        let assigned = assign_regions(
            &Pose2::identity(),
            &[(9, Pose2::new(5.0, 10.0, 0.0, 0.0))],
            &s,
            2,
            4,
        )
        .unwrap();
        assert_eq!(assigned.len(), 1);
        assert_eq!(assigned[0].0, 9);
    }

    #[test]
    fn duplicate_ids_resolve_to_distinct_candidates() {
        let s = spec();
        // Two vehicles, each observed at two frames; four regions claimable
        // but only two distinct candidates may survive.
        let others = vec![
            (1, Pose2::new(-7.5, -22.5, 0.0, 0.0)),
            (1, Pose2::new(-7.5, -7.5, 0.0, 10.0)),
            (2, Pose2::new(7.5, 22.5, 0.0, 0.0)),
            (2, Pose2::new(7.5, 7.5, 0.0, 10.0)),
        ];
        let assigned = assign_regions(&Pose2::identity(), &others, &s, 2, 4).unwrap();
        assert_eq!(assigned.len(), 2);
        let ids: Vec<VehicleId> = assigned.iter().map(|a| a.0).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn partition_ties_break_to_lower_id() {
        let s = spec();
        let p = Pose2::new(-7.5, -22.5, 0.0, 0.0);
        let assigned = assign_regions(&Pose2::identity(), &[(4, p), (2, p)], &s, 2, 4).unwrap();
        // Both vehicles sit exactly on region 0's center; id 2 wins it.
        let r0 = assigned.iter().find(|a| a.2 == 0).unwrap();
        assert_eq!(r0.0, 2);
    }

    #[test]
    fn partition_carries_maps_through() {
        let s = spec();
        let m = UncertaintyMap::empty(s);
        let cs = partition_candidates(
            (0, Pose2::identity(), m.clone()),
            vec![(3, Pose2::new(2.0, 2.0, 0.0, 0.0), m)],
            &s,
            2,
            4,
        )
        .unwrap();
        assert_eq!(cs.candidates.len(), 1);
        assert_eq!(cs.candidates[0].id, 3);
    }
}
