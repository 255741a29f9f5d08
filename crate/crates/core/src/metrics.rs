//! Instance-level map evaluation: Chamfer distance between polylines, greedy
//! confidence-ordered matching, and average precision over the fixed
//! threshold set {0.5, 1.0, 1.5} meters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{clip_to_range, dist, resample_to_count, BevGridSpec, ElementClass, MapElement};

/// Chamfer thresholds (meters) an AP score averages over.
pub const CHAMFER_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];

/// Number of equidistant samples each polyline is reduced to before the
/// symmetric nearest-neighbor average.
pub const CHAMFER_SAMPLES: usize = 100;

/// Symmetric Chamfer distance between two polylines: each is resampled to
/// [`CHAMFER_SAMPLES`] equidistant points, then the mean nearest-neighbor
/// distances in both directions are averaged.
pub fn chamfer_distance(a: &MapElement, b: &MapElement) -> Result<f64> {
    chamfer_distance_sampled(&a.points, &b.points, CHAMFER_SAMPLES)
}

/// Chamfer distance at an explicit sample count; the metric definition with
/// the resampling density left adjustable.
pub fn chamfer_distance_sampled(
    a: &[(f64, f64)],
    b: &[(f64, f64)],
    samples: usize,
) -> Result<f64> {
    for (pts, name) in [(a, "first"), (b, "second")] {
        if pts.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "{name} polyline has {} points, need at least 2",
                pts.len()
            )));
        }
        if pts.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "{name} polyline contains non-finite coordinates"
            )));
        }
    }
    let pa = resample_to_count(a, samples);
    let pb = resample_to_count(b, samples);
    let mean_min = |from: &[(f64, f64)], to: &[(f64, f64)]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|&p| {
                to.iter()
                    .map(|&q| dist(p, q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / from.len() as f64
    };
    Ok(0.5 * (mean_min(&pa, &pb) + mean_min(&pb, &pa)))
}

/// Outcome of matching one prediction list against one ground-truth list.
#[derive(Debug, Clone)]
pub struct Matching {
    /// Prediction indices in descending-confidence order.
    pub order: Vec<usize>,
    /// True-positive flag per ordered prediction.
    pub tp: Vec<bool>,
    /// Matched ground-truth index per ordered prediction.
    pub assigned: Vec<Option<usize>>,
}

/// Greedy matching: predictions in descending confidence each take the
/// nearest unmatched ground truth with Chamfer distance strictly below the
/// threshold. Confidence ties keep input order; distance ties take the lower
/// ground-truth index.
pub fn match_greedy(preds: &[MapElement], gts: &[MapElement], threshold: f64) -> Result<Matching> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        preds[j]
            .confidence
            .partial_cmp(&preds[i].confidence)
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    let mut assigned = Vec::with_capacity(preds.len());
    for &pi in &order {
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let cd = chamfer_distance(&preds[pi], gt)?;
            if cd < threshold && best.map_or(true, |(bd, _)| cd < bd) {
                best = Some((cd, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                gt_taken[gi] = true;
                tp.push(true);
                assigned.push(Some(gi));
            }
            None => {
                tp.push(false);
                assigned.push(None);
            }
        }
    }
    Ok(Matching {
        order,
        tp,
        assigned,
    })
}

/// Area under the precision-recall curve with all-point interpolation, given
/// the true-positive sequence in confidence order.
pub fn ap_from_tp_sequence(tp: &[bool], num_gts: usize) -> f64 {
    if num_gts == 0 {
        return if tp.is_empty() { 1.0 } else { 0.0 };
    }
    if tp.is_empty() {
        return 0.0;
    }
    let n = tp.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp_cum = 0usize;
    for (k, &hit) in tp.iter().enumerate() {
        if hit {
            tp_cum += 1;
        }
        precision.push(tp_cum as f64 / (k + 1) as f64);
        recall.push(tp_cum as f64 / num_gts as f64);
    }
    // Precision envelope: best precision achievable at or beyond each rank.
    let mut envelope = precision.clone();
    for k in (0..n - 1).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        ap += (recall[k] - prev_recall) * envelope[k];
        prev_recall = recall[k];
    }
    ap
}

/// Average precision of `preds` against `gts` at one Chamfer threshold.
pub fn compute_ap(preds: &[MapElement], gts: &[MapElement], threshold: f64) -> Result<f64> {
    if gts.is_empty() {
        return Ok(if preds.is_empty() { 1.0 } else { 0.0 });
    }
    let m = match_greedy(preds, gts, threshold)?;
    Ok(ap_from_tp_sequence(&m.tp, gts.len()))
}

/// Per-class evaluation results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub cls: ElementClass,
    pub ap_by_threshold: [f64; 3],
    pub ap: f64,
    pub num_preds: usize,
    pub num_gts: usize,
}

/// Evaluation summary: AP per class per threshold, the per-class means, and
/// their mean (mAP).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: f64,
}

impl EvalReport {
    pub fn class(&self, cls: ElementClass) -> &ClassReport {
        &self.classes[cls.index()]
    }

    pub fn csv_header() -> &'static str {
        "ap_divider,ap_ped_crossing,ap_boundary,map"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6}",
            self.classes[0].ap, self.classes[1].ap, self.classes[2].ap, self.map
        )
    }
}

/// Clips predictions and ground truth to the extent, then scores each class
/// at each threshold. The mAP is the mean of the three per-class APs.
pub fn evaluate(preds: &[MapElement], gts: &[MapElement], spec: &BevGridSpec) -> Result<EvalReport> {
    let preds = clip_to_range(preds, spec);
    let gts = clip_to_range(gts, spec);
    let mut classes = Vec::with_capacity(3);
    for cls in ElementClass::ALL {
        let p: Vec<MapElement> = preds.iter().filter(|e| e.cls == cls).cloned().collect();
        let g: Vec<MapElement> = gts.iter().filter(|e| e.cls == cls).cloned().collect();
        let mut ap_by_threshold = [0.0; 3];
        for (k, &t) in CHAMFER_THRESHOLDS.iter().enumerate() {
            ap_by_threshold[k] = compute_ap(&p, &g, t)?;
        }
        let ap = ap_by_threshold.iter().sum::<f64>() / 3.0;
        classes.push(ClassReport {
            cls,
            ap_by_threshold,
            ap,
            num_preds: p.len(),
            num_gts: g.len(),
        });
    }
    let map = classes.iter().map(|c| c.ap).sum::<f64>() / 3.0;
    Ok(EvalReport { classes, map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{polyline_length, Pose2};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn line(cls: ElementClass, pts: Vec<(f64, f64)>, conf: f64) -> MapElement {
        MapElement::new(cls, pts, conf).unwrap()
    }

    fn divider(pts: Vec<(f64, f64)>, conf: f64) -> MapElement {
        line(ElementClass::Divider, pts, conf)
    }

    #[test]
    fn chamfer_of_identical_polylines_is_zero() {
        let a = divider(vec![(0.0, 0.0), (5.0, 1.0), (10.0, 0.0)], 1.0);
        assert_relative_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_of_parallel_offset_segments() {
        let a = divider(vec![(0.0, 0.0), (10.0, 0.0)], 1.0);
        let b = divider(vec![(0.0, 1.0), (10.0, 1.0)], 1.0);
        assert_relative_eq!(chamfer_distance(&a, &b).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn chamfer_close_to_dense_reference_on_curved_input() {
        // Quarter circle of radius 10 against its chord; the dense reference
        // uses an independent nearest-neighbor evaluation at 10^4 samples.
        let n = 50;
        let arc: Vec<(f64, f64)> = (0..=n)
            .map(|k| {
                let a = std::f64::consts::FRAC_PI_2 * k as f64 / n as f64;
                (10.0 * a.cos(), 10.0 * a.sin())
            })
            .collect();
        let chord = vec![(10.0, 0.0), (0.0, 10.0)];

        let dense_samples = 10_000;
        let sample = |pts: &[(f64, f64)]| -> Vec<(f64, f64)> {
            let total = polyline_length(pts);
            (0..dense_samples)
                .map(|i| {
                    crate::geom::point_at_arc_length(
                        pts,
                        total * i as f64 / (dense_samples - 1) as f64,
                    )
                })
                .collect()
        };
        let pa = sample(&arc);
        let pb = sample(&chord);
        let mean_min = |xs: &[(f64, f64)], ys: &[(f64, f64)]| {
            xs.iter()
                .map(|&p| {
                    ys.iter()
                        .map(|&q| dist(p, q))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / xs.len() as f64
        };
        let reference = 0.5 * (mean_min(&pa, &pb) + mean_min(&pb, &pa));

        let got = chamfer_distance(
            &divider(arc, 1.0),
            &divider(chord, 1.0),
        )
        .unwrap();
        assert!(
            (got - reference).abs() / reference < 0.01,
            "100-sample chamfer {got} departs from dense reference {reference} by more than 1%"
        );
    }

    #[test]
    fn chamfer_rejects_degenerate_polyline() {
        let a = divider(vec![(0.0, 0.0), (1.0, 0.0)], 1.0);
        assert!(chamfer_distance_sampled(&a.points, &[(0.0, 0.0)], 100).is_err());
    }

    proptest! {
        #[test]
        fn chamfer_invariant_under_rigid_motion(
            tx in -50.0..50.0f64,
            ty in -50.0..50.0f64,
            yaw in -3.0..3.0f64,
        ) {
            let a = divider(vec![(0.0, 0.0), (4.0, 2.0), (9.0, -1.0)], 1.0);
            let b = divider(vec![(1.0, 1.0), (5.0, 0.0), (8.0, 2.0)], 1.0);
            let motion = Pose2::new(tx, ty, yaw, 0.0);
            let mv = |e: &MapElement| MapElement {
                cls: e.cls,
                points: e.points.iter().map(|&p| motion.transform_point(p)).collect(),
                confidence: e.confidence,
            };
            let before = chamfer_distance(&a, &b).unwrap();
            let after = chamfer_distance(&mv(&a), &mv(&b)).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn ap_is_monotone_in_threshold(
            offsets in proptest::collection::vec(0.0..2.0f64, 1..5),
        ) {
            let gts: Vec<MapElement> = (0..offsets.len())
                .map(|k| divider(vec![(0.0, 5.0 * k as f64), (10.0, 5.0 * k as f64)], 1.0))
                .collect();
            let preds: Vec<MapElement> = offsets
                .iter()
                .enumerate()
                .map(|(k, &dy)| {
                    divider(
                        vec![(0.0, 5.0 * k as f64 + dy), (10.0, 5.0 * k as f64 + dy)],
                        1.0 - 0.1 * k as f64,
                    )
                })
                .collect();
            let mut prev = -1.0;
            for t in CHAMFER_THRESHOLDS {
                let ap = compute_ap(&preds, &gts, t).unwrap();
                prop_assert!(ap >= prev - 1e-12);
                prev = ap;
            }
        }
    }

    #[test]
    fn ap_hand_worked_three_prediction_case() {
        // Two ground truths; predictions at confidences 0.9 (match), 0.8
        // (miss), 0.7 (match) give precisions 1, 1/2, 2/3 at recalls
        // 1/2, 1/2, 1, so the interpolated area is 5/6.
        let gts = vec![
            divider(vec![(0.0, 0.0), (10.0, 0.0)], 1.0),
            divider(vec![(0.0, 10.0), (10.0, 10.0)], 1.0),
        ];
        let preds = vec![
            divider(vec![(0.0, 0.1), (10.0, 0.1)], 0.9),
            divider(vec![(0.0, 50.0), (10.0, 50.0)], 0.8),
            divider(vec![(0.0, 10.2), (10.0, 10.2)], 0.7),
        ];
        let ap = compute_ap(&preds, &gts, 0.5).unwrap();
        assert_relative_eq!(ap, 5.0 / 6.0, epsilon = 1e-9);
    }

    #[test]
    fn ap_zero_when_all_predictions_are_far() {
        let gts = vec![divider(vec![(0.0, 0.0), (10.0, 0.0)], 1.0)];
        let preds = vec![divider(vec![(0.0, 2.0), (10.0, 2.0)], 0.9)];
        assert_relative_eq!(compute_ap(&preds, &gts, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn ap_empty_edge_cases() {
        let e = divider(vec![(0.0, 0.0), (1.0, 0.0)], 1.0);
        assert_eq!(compute_ap(&[], &[], 0.5).unwrap(), 1.0);
        assert_eq!(compute_ap(&[e.clone()], &[], 0.5).unwrap(), 0.0);
        assert_eq!(compute_ap(&[], &[e], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn threshold_is_strict() {
        let gts = vec![divider(vec![(0.0, 0.0), (10.0, 0.0)], 1.0)];
        let exactly_at = vec![divider(vec![(0.0, 0.5), (10.0, 0.5)], 1.0)];
        assert_relative_eq!(compute_ap(&exactly_at, &gts, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_perfect_predictions_score_one() {
        let spec = BevGridSpec::default_extent();
        let gts = vec![
            divider(vec![(-5.0, -20.0), (-5.0, 20.0)], 1.0),
            line(ElementClass::PedCrossing, vec![(-6.0, 0.0), (6.0, 0.0)], 1.0),
            line(ElementClass::Boundary, vec![(10.0, -20.0), (10.0, 20.0)], 1.0),
        ];
        let report = evaluate(&gts, &gts, &spec).unwrap();
        assert_relative_eq!(report.map, 1.0);
        for c in &report.classes {
            assert_relative_eq!(c.ap, 1.0);
        }
    }

    #[test]
    fn evaluate_counts_absent_class_as_perfect_when_unpredicted() {
        let spec = BevGridSpec::default_extent();
        let gts = vec![divider(vec![(-5.0, -20.0), (-5.0, 20.0)], 1.0)];
        let report = evaluate(&gts, &gts, &spec).unwrap();
        assert_relative_eq!(report.class(ElementClass::PedCrossing).ap, 1.0);
        assert_relative_eq!(report.map, 1.0);
    }

    #[test]
    fn evaluate_clips_before_scoring() {
        let spec = BevGridSpec::default_extent();
        // Ground truth extends past the extent; a prediction matching only
        // the clipped portion still scores perfectly.
        let gts = vec![divider(vec![(0.0, -100.0), (0.0, 100.0)], 1.0)];
        let preds = vec![divider(vec![(0.0, -30.0), (0.0, 30.0)], 1.0)];
        let report = evaluate(&preds, &gts, &spec).unwrap();
        assert_relative_eq!(report.class(ElementClass::Divider).ap, 1.0);
    }

    /// Exhaustive assignment search for the best achievable AP: every
    /// injective prediction-to-truth assignment respecting the threshold is
    /// enumerated.
    fn best_ap_exhaustive(preds: &[MapElement], gts: &[MapElement], threshold: f64) -> f64 {
        if gts.is_empty() {
            return if preds.is_empty() { 1.0 } else { 0.0 };
        }
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&i, &j| {
            preds[j]
                .confidence
                .partial_cmp(&preds[i].confidence)
                .unwrap()
                .then(i.cmp(&j))
        });
        let cd: Vec<Vec<f64>> = order
            .iter()
            .map(|&pi| {
                gts.iter()
                    .map(|g| chamfer_distance(&preds[pi], g).unwrap())
                    .collect()
            })
            .collect();
        fn recurse(
            k: usize,
            cd: &[Vec<f64>],
            threshold: f64,
            taken: &mut Vec<bool>,
            tp: &mut Vec<bool>,
            best: &mut f64,
            num_gts: usize,
        ) {
            if k == cd.len() {
                *best = best.max(ap_from_tp_sequence(tp, num_gts));
                return;
            }
            tp.push(false);
            recurse(k + 1, cd, threshold, taken, tp, best, num_gts);
            tp.pop();
            for g in 0..num_gts {
                if !taken[g] && cd[k][g] < threshold {
                    taken[g] = true;
                    tp.push(true);
                    recurse(k + 1, cd, threshold, taken, tp, best, num_gts);
                    tp.pop();
                    taken[g] = false;
                }
            }
        }
        let mut best = 0.0;
        let mut taken = vec![false; gts.len()];
        let mut tp = Vec::new();
        recurse(0, &cd, threshold, &mut taken, &mut tp, &mut best, gts.len());
        best
    }

    #[test]
    fn greedy_matching_equals_exhaustive_assignment_on_fixtures() {
        let gts = vec![
            divider(vec![(0.0, 0.0), (10.0, 0.0)], 1.0),
            divider(vec![(0.0, 3.0), (10.0, 3.0)], 1.0),
            divider(vec![(0.0, 6.0), (10.0, 6.0)], 1.0),
        ];
        let fixtures: Vec<Vec<MapElement>> = vec![
            // Clean one-to-one.
            vec![
                divider(vec![(0.0, 0.1), (10.0, 0.1)], 0.9),
                divider(vec![(0.0, 3.1), (10.0, 3.1)], 0.8),
            ],
            // A duplicate prediction competing for the same truth.
            vec![
                divider(vec![(0.0, 0.1), (10.0, 0.1)], 0.9),
                divider(vec![(0.0, 0.2), (10.0, 0.2)], 0.85),
                divider(vec![(0.0, 6.2), (10.0, 6.2)], 0.5),
            ],
            // A far miss plus near hits with interleaved confidences.
            vec![
                divider(vec![(0.0, 40.0), (10.0, 40.0)], 0.95),
                divider(vec![(0.0, 2.9), (10.0, 2.9)], 0.7),
                divider(vec![(0.0, 5.8), (10.0, 5.8)], 0.6),
                divider(vec![(0.0, 0.3), (10.0, 0.3)], 0.4),
            ],
        ];
        for preds in fixtures {
            for t in CHAMFER_THRESHOLDS {
                let greedy = compute_ap(&preds, &gts, t).unwrap();
                let best = best_ap_exhaustive(&preds, &gts, t);
                assert_relative_eq!(greedy, best, epsilon = 1e-12);
            }
        }
    }
}
