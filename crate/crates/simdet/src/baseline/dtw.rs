//! Dynamic time warping: alignment cost, the exponential similarity
//! transform, and a sliding scan over utterance segments.

use crate::error::{Error, Result};
use crate::eval::{BBox, ScoredMap};
use crate::tensor::Tensor;

/// DTW baseline knobs: the cost-to-similarity scale, the scan step in
/// frames, and the candidate segment lengths as multiples of the keyword
/// length.
#[derive(Clone, Debug)]
pub struct DtwConfig {
    pub sigma: f64,
    pub scan_step: usize,
    pub length_factors: Vec<f64>,
}

impl Default for DtwConfig {
    fn default() -> Self {
        DtwConfig { sigma: 50.0, scan_step: 1, length_factors: vec![0.75, 1.0, 1.25] }
    }
}

impl DtwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.scan_step == 0 {
            return Err(Error::invalid("scan step must be positive".to_string()));
        }
        if self.length_factors.is_empty() || self.length_factors.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::invalid("length factors must be positive".to_string()));
        }
        Ok(())
    }
}

/// Frames-major copy of a `[channels, frames]` tensor.
fn frames_of(seq: &Tensor) -> Result<Vec<Vec<f64>>> {
    if seq.rank() != 2 {
        return Err(Error::shape(format!(
            "feature sequences are [channels, frames], got {:?}",
            seq.shape()
        )));
    }
    let (c, len) = (seq.shape()[0], seq.shape()[1]);
    if len == 0 {
        return Err(Error::invalid("empty feature sequence".to_string()));
    }
    Ok((0..len)
        .map(|t| (0..c).map(|ch| seq.values()[ch * len + t]).collect())
        .collect())
}

fn frame_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Cumulative cost of the cheapest monotone alignment between two frame
/// sequences: dynamic programming over the full grid with steps (1,0), (0,1)
/// and (1,1), each cell charging the Euclidean distance of its frame pair.
fn dp_cost(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let mut prev = vec![f64::INFINITY; n];
    let mut cur = vec![f64::INFINITY; n];
    for i in 0..m {
        for j in 0..n {
            let d = frame_distance(&a[i], &b[j]);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 {
                    best = best.min(prev[j]);
                }
                if j > 0 {
                    best = best.min(cur[j - 1]);
                }
                if i > 0 && j > 0 {
                    best = best.min(prev[j - 1]);
                }
                best
            };
            cur[j] = d + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n - 1]
}

/// DTW cost between two `[channels, frames]` sequences.
pub fn dtw_cost(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape()[0] != b.shape()[0] {
        return Err(Error::shape(format!(
            "channel mismatch: {} vs {}",
            a.shape()[0],
            b.shape()[0]
        )));
    }
    Ok(dp_cost(&frames_of(a)?, &frames_of(b)?))
}

/// Converts an alignment cost to a similarity in `(0, 1]`.
pub fn dtw_similarity(cost: f64, sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    (-cost / sigma).exp()
}

/// Scans the keyword across the utterance: for each start step and candidate
/// segment length the DTW similarity is computed; the per-location score is
/// the best over lengths, the location's box is that best segment, and the
/// pair confidence is the maximum location score.
pub fn dtw_scan(keyword: &Tensor, utterance: &Tensor, config: &DtwConfig) -> Result<ScoredMap> {
    config.validate()?;
    let kw = frames_of(keyword)?;
    let utt = frames_of(utterance)?;
    if keyword.shape()[0] != utterance.shape()[0] {
        return Err(Error::shape(format!(
            "channel mismatch: {} vs {}",
            keyword.shape()[0],
            utterance.shape()[0]
        )));
    }
    if kw.len() >= utt.len() {
        return Err(Error::invalid(format!(
            "keyword ({} frames) must be shorter than the utterance ({} frames)",
            kw.len(),
            utt.len()
        )));
    }

    let lengths: Vec<usize> = {
        let mut v: Vec<usize> = config
            .length_factors
            .iter()
            .map(|f| ((kw.len() as f64 * f).round() as usize).clamp(1, utt.len()))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let min_len = lengths[0];

    let mut scores = Vec::new();
    let mut boxes = Vec::new();
    let mut start = 0usize;
    while start + min_len <= utt.len() {
        let mut best = f64::NEG_INFINITY;
        let mut best_len = min_len;
        for &len in &lengths {
            if start + len > utt.len() {
                break;
            }
            let cost = dp_cost(&kw, &utt[start..start + len]);
            let sim = dtw_similarity(cost, config.sigma);
            if sim > best {
                best = sim;
                best_len = len;
            }
        }
        scores.push(best);
        boxes.push(BBox::interval(start as f64, best_len as f64)?);
        start += config.scan_step;
    }

    let confidence = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ScoredMap { scores, boxes, confidence })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn seq(frames: &[Vec<f64>]) -> Tensor {
        let c = frames[0].len();
        let len = frames.len();
        let mut values = vec![0.0; c * len];
        for (t, f) in frames.iter().enumerate() {
            for (ch, &v) in f.iter().enumerate() {
                values[ch * len + t] = v;
            }
        }
        Tensor::new(vec![c, len], values).unwrap()
    }

    fn random_frames(rng: &mut rand_chacha::ChaCha8Rng, len: usize, c: usize) -> Vec<Vec<f64>> {
        (0..len).map(|_| (0..c).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).collect()
    }

    #[test]
    fn identical_sequences_cost_nothing() {
        let a = seq(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]]);
        assert_eq!(dtw_cost(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn single_frames_cost_their_euclidean_distance() {
        let a = seq(&[vec![0.0, 0.0]]);
        let b = seq(&[vec![3.0, 4.0]]);
        assert_eq!(dtw_cost(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn dp_matches_exhaustive_enumeration_on_a_small_pair() {
        let mut rng = rng_from(3);
        let a = random_frames(&mut rng, 4, 3);
        let b = random_frames(&mut rng, 3, 3);
        let dp = dtw_cost(&seq(&a), &seq(&b)).unwrap();
        let brute = simdet_testkit::dtw_enumerate_oracle(&a, &b);
        assert_eq!(dp, brute, "dp {dp} vs enumeration {brute}");
    }

    #[test]
    fn dp_equals_enumeration_exhaustively_up_to_length_five() {
        let mut rng = rng_from(11);
        let mut cases = 0;
        for la in 1..=5 {
            for lb in 1..=5 {
                for _ in 0..10 {
                    let a = random_frames(&mut rng, la, 2);
                    let b = random_frames(&mut rng, lb, 2);
                    let dp = dtw_cost(&seq(&a), &seq(&b)).unwrap();
                    let brute = simdet_testkit::dtw_enumerate_oracle(&a, &b);
                    assert_eq!(dp, brute, "lengths {la}x{lb}");
                    cases += 1;
                }
            }
        }
        assert_eq!(cases, 250);
    }

    #[test]
    fn diagonal_alignment_bounds_the_cost_for_equal_lengths() {
        let mut rng = rng_from(17);
        for _ in 0..50 {
            let a = random_frames(&mut rng, 6, 4);
            let b = random_frames(&mut rng, 6, 4);
            let diag: f64 = a.iter().zip(&b).map(|(x, y)| frame_distance(x, y)).sum();
            assert!(dtw_cost(&seq(&a), &seq(&b)).unwrap() <= diag + 1e-12);
        }
    }

    #[test]
    fn cost_is_symmetric_nonnegative_and_zero_iff_identical() {
        let mut rng = rng_from(23);
        for _ in 0..50 {
            let a = random_frames(&mut rng, rng.gen_range(1..6), 3);
            let b = random_frames(&mut rng, rng.gen_range(1..6), 3);
            let ab = dtw_cost(&seq(&a), &seq(&b)).unwrap();
            let ba = dtw_cost(&seq(&b), &seq(&a)).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab >= 0.0);
            if ab == 0.0 {
                // Zero cost implies a perfect alignment; with continuous
                // random frames that only happens for identical sequences.
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn similarity_transform_values() {
        assert_eq!(dtw_similarity(0.0, 50.0), 1.0);
        assert!((dtw_similarity(50.0, 50.0) - (-1.0f64).exp()).abs() < 1e-12);
        assert!(dtw_similarity(10.0, 50.0) > dtw_similarity(20.0, 50.0));
    }

    #[test]
    fn scan_finds_an_exact_copy_with_score_one() {
        let mut rng = rng_from(31);
        let kw = random_frames(&mut rng, 6, 3);
        let mut utt = random_frames(&mut rng, 30, 3);
        let offset = 12;
        for (i, f) in kw.iter().enumerate() {
            utt[offset + i] = f.clone();
        }
        let scan = dtw_scan(&seq(&kw), &seq(&utt), &DtwConfig::default()).unwrap();
        let argmax = scan.argmax();
        assert_eq!(scan.boxes[argmax].offset[0], offset as f64);
        assert!((scan.scores[argmax] - 1.0).abs() < 1e-12);
        assert!((scan.confidence - 1.0).abs() < 1e-12);
        assert!(scan.scores.iter().all(|&s| s > 0.0 && s <= 1.0));
    }

    #[test]
    fn scan_localises_a_warped_copy_within_two_steps() {
        use crate::data::{warp_resample, SequenceGenConfig};
        let cfg = SequenceGenConfig::exact();
        let kw = crate::data::class_template(5, &cfg);
        let warped = warp_resample(&kw, (kw.shape()[1] as f64 * 1.25).round() as usize);
        let wlen = warped.shape()[1];
        let mut rng = rng_from(37);
        let mut utt = random_frames(&mut rng, 120, cfg.channels);
        let offset = 40;
        for i in 0..wlen {
            utt[offset + i] =
                (0..cfg.channels).map(|ch| warped.values()[ch * wlen + i]).collect();
        }
        let scan = dtw_scan(&kw, &seq(&utt), &DtwConfig::default()).unwrap();
        let argmax = scan.argmax();
        let found = scan.boxes[argmax].offset[0];
        assert!(
            (found - offset as f64).abs() <= 2.0,
            "argmax at {found}, truth at {offset}"
        );
    }

    #[test]
    fn keyword_must_be_shorter_than_utterance() {
        let mut rng = rng_from(41);
        let kw = random_frames(&mut rng, 10, 2);
        let utt = random_frames(&mut rng, 10, 2);
        assert!(dtw_scan(&seq(&kw), &seq(&utt), &DtwConfig::default()).is_err());
    }
}
