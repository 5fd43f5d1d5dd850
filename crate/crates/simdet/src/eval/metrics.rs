//! Pooled average precision and the binary pair-classification measures.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::boxes::{iou, BBox};
use super::detect::{Detection, PostprocessParams};

/// Evaluation-side record of one episode: its binary label and, for positive
/// episodes, the ground-truth box.
#[derive(Clone, Debug)]
pub struct EpisodeTruth {
    pub episode_id: u64,
    pub label: u8,
    pub truth: Option<BBox>,
}

/// One point of a raw precision/recall walk down the ranked detections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

fn ranked<'a>(detections: &'a [Detection]) -> Vec<&'a Detection> {
    let mut v: Vec<&Detection> = detections.iter().collect();
    v.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("confidences must not be NaN")
            .then(a.episode_id.cmp(&b.episode_id))
    });
    v
}

/// Raw precision/recall prefix points over detections ranked by descending
/// confidence (ties by episode id). A detection is a true positive when its
/// episode is positive, its IoU with that episode's truth box meets the
/// threshold, and the truth box is not already matched; the recall
/// denominator is the number of positive episodes.
pub fn pr_curve(
    detections: &[Detection],
    truths: &[EpisodeTruth],
    iou_threshold: f64,
) -> Vec<PrPoint> {
    let by_id: BTreeMap<u64, &EpisodeTruth> =
        truths.iter().map(|t| (t.episode_id, t)).collect();
    let num_pos = truths.iter().filter(|t| t.label == 1).count();
    if num_pos == 0 {
        return Vec::new();
    }

    let mut matched: BTreeSet<u64> = BTreeSet::new();
    let mut points = Vec::with_capacity(detections.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for det in ranked(detections) {
        let truth = by_id.get(&det.episode_id);
        let is_tp = match truth {
            Some(t) if t.label == 1 => match &t.truth {
                Some(tb) => {
                    iou(&det.bbox, tb) >= iou_threshold && !matched.contains(&det.episode_id)
                }
                None => false,
            },
            _ => false,
        };
        if is_tp {
            matched.insert(det.episode_id);
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(PrPoint {
            recall: tp as f64 / num_pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    points
}

/// Pooled average precision: area under the precision envelope over recall
/// (all-point interpolation), with detections of all classes ranked together.
pub fn average_precision(
    detections: &[Detection],
    truths: &[EpisodeTruth],
    iou_threshold: f64,
) -> f64 {
    let points = pr_curve(detections, truths, iou_threshold);
    if points.is_empty() {
        return 0.0;
    }
    // Envelope from each prefix onward: the best precision at recall >= r_i.
    let mut env = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].precision);
        env[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, p) in points.iter().enumerate() {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env[i];
            prev_recall = p.recall;
        }
    }
    ap
}

/// Precision of the envelope at the smallest achievable recall at or above
/// each requested level, in the binary pair-classification view: every
/// episode's pair score is ranked (descending, ties by episode id) and an
/// episode counts as correct exactly when its label is 1. Unreachable levels
/// yield 0.
pub fn precision_at_recall(scores: &[(u64, f64, u8)], levels: &[f64]) -> Vec<f64> {
    let num_pos = scores.iter().filter(|(_, _, y)| *y == 1).count();
    if num_pos == 0 {
        return vec![0.0; levels.len()];
    }
    let mut order: Vec<&(u64, f64, u8)> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).expect("scores must not be NaN").then(a.0.cmp(&b.0))
    });

    let mut points = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, (_, _, label)) in order.iter().enumerate() {
        if **label == 1 {
            tp += 1;
        }
        points.push(PrPoint {
            recall: tp as f64 / num_pos as f64,
            precision: tp as f64 / (rank + 1) as f64,
        });
    }
    let mut env = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].precision);
        env[i] = best;
    }

    levels
        .iter()
        .map(|&level| {
            points
                .iter()
                .position(|p| p.recall >= level)
                .map(|i| env[i])
                .unwrap_or(0.0)
        })
        .collect()
}

/// Average precision re-evaluated at each IoU threshold. For a fixed
/// detection set the result is non-increasing in the threshold.
pub fn ap_iou_sweep(
    detections: &[Detection],
    truths: &[EpisodeTruth],
    thresholds: &[f64],
) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&t| (t, average_precision(detections, truths, t)))
        .collect()
}

/// Everything reported for one N-way evaluation set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub set: String,
    pub n_way: usize,
    pub iou_threshold: f64,
    pub ap: f64,
    /// Precision at each requested recall level, keyed by the level.
    pub precision_at_recall: BTreeMap<String, f64>,
    pub calibration: PostprocessParams,
    pub num_episodes: usize,
    pub num_positives: usize,
    pub pr_curve: Vec<PrPoint>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::detect::Detection;

    fn det(id: u64, conf: f64, start: f64) -> Detection {
        Detection { episode_id: id, bbox: BBox::interval(start, 10.0).unwrap(), confidence: conf }
    }

    fn truth(id: u64, label: u8, start: Option<f64>) -> EpisodeTruth {
        EpisodeTruth {
            episode_id: id,
            label,
            truth: start.map(|s| BBox::interval(s, 10.0).unwrap()),
        }
    }

    #[test]
    fn single_correct_detection_is_perfect() {
        let dets = vec![det(0, 0.9, 0.0)];
        let truths = vec![truth(0, 1, Some(0.0))];
        assert_eq!(average_precision(&dets, &truths, 0.5), 1.0);
    }

    #[test]
    fn tp_fp_tp_ordering_gives_five_sixths() {
        // Ranked [TP 0.9, FP 0.8, TP 0.7] with two positives:
        // AP = 1 * 0.5 + (2/3) * 0.5 = 5/6.
        let dets = vec![det(0, 0.9, 0.0), det(1, 0.8, 50.0), det(2, 0.7, 0.0)];
        let truths = vec![truth(0, 1, Some(0.0)), truth(1, 0, None), truth(2, 1, Some(0.0))];
        let ap = average_precision(&dets, &truths, 0.5);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap = {ap}");
    }

    #[test]
    fn all_false_positives_score_zero() {
        let dets = vec![det(0, 0.9, 50.0), det(1, 0.8, 50.0)];
        let truths = vec![truth(0, 1, Some(0.0)), truth(1, 0, None)];
        assert_eq!(average_precision(&dets, &truths, 0.5), 0.0);
    }

    #[test]
    fn truth_boxes_match_at_most_once() {
        // Two detections on the same positive episode: only the first ranked
        // one can be a true positive.
        let dets = vec![det(0, 0.9, 0.0), det(0, 0.8, 0.0)];
        let truths = vec![truth(0, 1, Some(0.0))];
        let points = pr_curve(&dets, &truths, 0.5);
        assert_eq!(points[0].precision, 1.0);
        assert_eq!(points[1].precision, 0.5);
        assert_eq!(points[1].recall, 1.0);
    }

    #[test]
    fn perfect_ranking_hits_precision_one_everywhere() {
        let scores = vec![(0, 0.9, 1), (1, 0.8, 1), (2, 0.2, 0), (3, 0.1, 0)];
        let p = precision_at_recall(&scores, &[0.5, 0.9, 0.99]);
        assert_eq!(p, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn reversed_ranking_with_one_positive_in_ten() {
        let mut scores: Vec<(u64, f64, u8)> =
            (0..9).map(|i| (i, 0.9 - i as f64 * 0.05, 0)).collect();
        scores.push((9, 0.1, 1));
        let p = precision_at_recall(&scores, &[0.5]);
        assert!((p[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn unreachable_recall_yields_zero() {
        let scores = vec![(0, 0.9, 0), (1, 0.8, 0)];
        let p = precision_at_recall(&scores, &[0.5]);
        assert_eq!(p, vec![0.0]);
    }

    #[test]
    fn sweep_is_non_increasing_and_loose_at_zero() {
        let dets = vec![det(0, 0.9, 4.0), det(1, 0.8, 50.0)];
        let truths = vec![truth(0, 1, Some(0.0)), truth(1, 0, None)];
        let sweep = ap_iou_sweep(&dets, &truths, &[0.0, 0.2, 0.3, 0.4, 0.5, 0.7]);
        for w in sweep.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
        // At threshold 0 any detection on a positive episode counts.
        assert_eq!(sweep[0].1, 1.0);
    }
}
