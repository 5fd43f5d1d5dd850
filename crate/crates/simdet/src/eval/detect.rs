//! Turning per-episode similarity maps into detections, and calibrating the
//! confidence threshold and boundary shifts on a validation set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use super::metrics::{average_precision, EpisodeTruth};
use crate::data::Episode;
use crate::error::{Error, Result};

/// A proposed box with confidence for one exemplar-target pair. Every pair
/// yields at most one detection, taken at the argmax of its similarity map.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub episode_id: u64,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Emission threshold plus the start/end shift constants applied to
/// sequence-track boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessParams {
    pub threshold: f64,
    pub shift_start: f64,
    pub shift_end: f64,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        PostprocessParams { threshold: 0.0, shift_start: 0.0, shift_end: 0.0 }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!(
                "emission threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Per-location scores of one exemplar against one target, each location
/// mapped to an input-space box, plus the pooled pair confidence.
#[derive(Clone, Debug)]
pub struct ScoredMap {
    pub scores: Vec<f64>,
    pub boxes: Vec<BBox>,
    pub confidence: f64,
}

impl ScoredMap {
    /// Index of the highest-scoring location, first on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Anything that can score an episode: the similarity network, a baseline, or
/// a diagnostic scorer. Implementations must be pure given frozen state so
/// episodes can be scored concurrently.
pub trait Scorer: Sync {
    fn score_episode(&self, episode: &Episode) -> Result<ScoredMap>;
}

/// The evaluation-side digest of a scored episode.
#[derive(Clone, Debug)]
pub struct ScoredEpisode {
    pub episode_id: u64,
    pub label: u8,
    pub truth: Option<BBox>,
    pub confidence: f64,
    pub argmax_box: BBox,
    pub target_extent: Vec<f64>,
}

/// Scores every episode, optionally fanning out over a worker pool. Results
/// are in episode order either way.
pub fn score_episodes(
    scorer: &dyn Scorer,
    episodes: &[Episode],
    parallel: bool,
) -> Result<Vec<ScoredEpisode>> {
    let digest = |ep: &Episode| -> Result<ScoredEpisode> {
        let scored = scorer.score_episode(ep)?;
        if scored.scores.len() != scored.boxes.len() || scored.scores.is_empty() {
            return Err(Error::invalid(format!(
                "scorer returned {} scores and {} boxes for episode {}",
                scored.scores.len(),
                scored.boxes.len(),
                ep.id
            )));
        }
        let argmax = scored.argmax();
        Ok(ScoredEpisode {
            episode_id: ep.id,
            label: ep.label,
            truth: ep.truth_box.clone(),
            confidence: scored.confidence,
            argmax_box: scored.boxes[argmax].clone(),
            target_extent: ep.target.shape()[1..].iter().map(|&e| e as f64).collect(),
        })
    };
    if parallel {
        episodes.par_iter().map(digest).collect()
    } else {
        episodes.iter().map(digest).collect()
    }
}

pub fn truths_of(scored: &[ScoredEpisode]) -> Vec<EpisodeTruth> {
    scored
        .iter()
        .map(|s| EpisodeTruth { episode_id: s.episode_id, label: s.label, truth: s.truth.clone() })
        .collect()
}

/// Emits one candidate detection per scored episode at its argmax location,
/// keeps it when the confidence strictly exceeds the threshold, and, for
/// sequence boxes, shifts start and end by the calibrated constants before
/// clamping to the target extent. Detections whose box degenerates after
/// clamping are dropped.
pub fn emit_detections(scored: &[ScoredEpisode], params: &PostprocessParams) -> Vec<Detection> {
    let mut out = Vec::new();
    for ep in scored {
        if !(ep.confidence > params.threshold) {
            continue;
        }
        let bbox = if ep.argmax_box.axes() == 1 {
            let start = ep.argmax_box.offset[0] + params.shift_start;
            let end = ep.argmax_box.end(0) + params.shift_end;
            let start = start.max(0.0);
            let end = end.min(ep.target_extent[0]);
            if end <= start {
                continue;
            }
            BBox::interval(start, end - start).expect("positive extent")
        } else {
            ep.argmax_box.clone()
        };
        out.push(Detection { episode_id: ep.episode_id, bbox, confidence: ep.confidence });
    }
    out
}

/// Grid-searches the emission threshold (and for the sequence track the
/// start/end shifts) to maximise average precision on a validation set.
/// Thresholds run over {0.05, 0.10, ..., 0.95}; shifts over whole frames in
/// [-5, 5]. Ties prefer the smallest threshold, then the smallest |a| + |b|.
pub fn calibrate_postprocess(
    scored_validation: &[ScoredEpisode],
    one_dimensional: bool,
    iou_threshold: f64,
) -> PostprocessParams {
    let truths = truths_of(scored_validation);
    let thresholds: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    let mut shifts: Vec<(f64, f64)> = if one_dimensional {
        let mut v = Vec::new();
        for a in -5..=5 {
            for b in -5..=5 {
                v.push((a as f64, b as f64));
            }
        }
        v.sort_by(|x, y| {
            let cost = |s: &(f64, f64)| s.0.abs() + s.1.abs();
            cost(x)
                .partial_cmp(&cost(y))
                .unwrap()
                .then(x.0.partial_cmp(&y.0).unwrap())
                .then(x.1.partial_cmp(&y.1).unwrap())
        });
        v
    } else {
        vec![(0.0, 0.0)]
    };
    if shifts.is_empty() {
        shifts.push((0.0, 0.0));
    }

    let mut best = PostprocessParams { threshold: thresholds[0], shift_start: shifts[0].0, shift_end: shifts[0].1 };
    let mut best_ap = -1.0;
    for &t in &thresholds {
        for &(a, b) in &shifts {
            let params = PostprocessParams { threshold: t, shift_start: a, shift_end: b };
            let ap = average_precision(&emit_detections(scored_validation, &params), &truths, iou_threshold);
            if ap > best_ap {
                best_ap = ap;
                best = params;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(id: u64, label: u8, conf: f64, start: f64, truth_start: Option<f64>) -> ScoredEpisode {
        ScoredEpisode {
            episode_id: id,
            label,
            truth: truth_start.map(|s| BBox::interval(s, 32.0).unwrap()),
            confidence: conf,
            argmax_box: BBox::interval(start, 32.0).unwrap(),
            target_extent: vec![200.0],
        }
    }

    #[test]
    fn threshold_one_suppresses_everything() {
        let eps = vec![scored(0, 1, 1.0, 0.0, Some(0.0))];
        let params = PostprocessParams { threshold: 1.0, ..Default::default() };
        assert!(emit_detections(&eps, &params).is_empty());
    }

    #[test]
    fn threshold_zero_emits_one_detection_per_episode() {
        let eps =
            vec![scored(0, 1, 0.8, 0.0, Some(0.0)), scored(1, 0, 0.3, 40.0, None)];
        let dets = emit_detections(&eps, &PostprocessParams::default());
        assert_eq!(dets.len(), 2);
    }

    #[test]
    fn zero_shifts_keep_raw_geometry() {
        let eps = vec![scored(0, 1, 0.8, 12.0, Some(12.0))];
        let dets = emit_detections(&eps, &PostprocessParams::default());
        assert_eq!(dets[0].bbox, BBox::interval(12.0, 32.0).unwrap());
    }

    #[test]
    fn shifts_apply_and_clamp_on_sequences() {
        let eps = vec![scored(0, 1, 0.8, 2.0, Some(0.0)), scored(1, 1, 0.9, 190.0, Some(160.0))];
        let params = PostprocessParams { threshold: 0.0, shift_start: -4.0, shift_end: 3.0 };
        let dets = emit_detections(&eps, &params);
        // Start clamps at 0; end clamps at the target extent.
        assert_eq!(dets[0].bbox.offset[0], 0.0);
        assert_eq!(dets[0].bbox.end(0), 37.0);
        assert_eq!(dets[1].bbox.offset[0], 186.0);
        assert_eq!(dets[1].bbox.end(0), 200.0);
    }

    #[test]
    fn perfect_scorer_calibrates_to_smallest_threshold() {
        // Exact confidences 1/0 with exact boxes: every threshold in (0, 1)
        // is optimal, so the tie rule picks 0.05.
        let eps = vec![
            scored(0, 1, 1.0, 0.0, Some(0.0)),
            scored(1, 0, 0.0, 40.0, None),
            scored(2, 1, 1.0, 8.0, Some(8.0)),
        ];
        let params = calibrate_postprocess(&eps, false, 0.5);
        assert!((params.threshold - 0.05).abs() < 1e-12);
        assert_eq!((params.shift_start, params.shift_end), (0.0, 0.0));
    }

    #[test]
    fn late_boxes_calibrate_a_corrective_start_shift() {
        // Boxes systematically 3 frames late: IoU (32-3)/(32+3) = 0.829 is
        // above 0.5, so tighten the gate and check the chosen shift moves the
        // start back by at least 2 frames under a stricter IoU threshold.
        let eps: Vec<ScoredEpisode> = (0..8)
            .map(|i| scored(i, 1, 0.9, i as f64 * 20.0 + 3.0, Some(i as f64 * 20.0)))
            .collect();
        let params = calibrate_postprocess(&eps, true, 0.95);
        assert!(params.shift_start <= -2.0, "start shift {}", params.shift_start);
    }

    #[test]
    fn calibration_is_deterministic() {
        let eps = vec![
            scored(0, 1, 0.9, 0.0, Some(0.0)),
            scored(1, 0, 0.5, 40.0, None),
            scored(2, 1, 0.4, 80.0, Some(81.0)),
        ];
        let a = calibrate_postprocess(&eps, true, 0.5);
        let b = calibrate_postprocess(&eps, true, 0.5);
        assert_eq!(a, b);
    }
}
