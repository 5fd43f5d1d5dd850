//! Similarity maps, attention pooling, the pair loss, and the closed-form
//! gradient that doubles as an independent oracle for the tape.
//!
//! For similarity scores `s_l` over target locations, attention weights are
//! the temperature softmax `w_l = exp(s_l / T) / sum exp(s_l' / T)`, the pair
//! score is the convex combination `y_hat = sum w_l s_l`, and a pair with
//! binary label `y` is charged `(y_hat - y)^2`. Differentiating through the
//! softmax gives
//!
//! ```text
//! d y_hat / d s_l = w_l * (1 + (s_l - y_hat) / T)
//! d loss  / d s_l = 2 * (y_hat - y) * w_l * (1 + (s_l - y_hat) / T)
//! ```
//!
//! For positive pairs the negative gradient grows with `s_l` (whenever
//! `s_l >= y_hat - T`), so locations that already score high are pushed up
//! hardest: weak supervision localises through this self-reinforcing loop.

use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::net::EmbedConfig;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Mapping from similarity-map indices to input-space boxes: index `l`
/// (row-major over `positions`) covers the box at `l * stride` with the
/// exemplar's receptive extent.
#[derive(Clone, Debug, PartialEq)]
pub struct MapGeometry {
    pub positions: Vec<usize>,
    pub stride: Vec<usize>,
    pub extent: Vec<usize>,
}

impl MapGeometry {
    /// Geometry of the similarity map between an exemplar and a target with
    /// the given input extents under `config`.
    pub fn from_extents(
        config: &EmbedConfig,
        exemplar_extents: &[usize],
        target_extents: &[usize],
    ) -> Result<Self> {
        if exemplar_extents.len() != config.spatial_rank
            || target_extents.len() != config.spatial_rank
        {
            return Err(Error::shape(format!(
                "geometry expects {} spatial extents",
                config.spatial_rank
            )));
        }
        let stride = config.total_stride();
        let mut positions = Vec::new();
        for (&e, &t) in exemplar_extents.iter().zip(target_extents) {
            let ee = config.embed_extent(e)?;
            let te = config.embed_extent(t)?;
            if ee > te {
                return Err(Error::shape(format!(
                    "exemplar embedding ({ee}) larger than target embedding ({te})"
                )));
            }
            positions.push(te - ee + 1);
        }
        Ok(MapGeometry {
            positions,
            stride: vec![stride; config.spatial_rank],
            extent: exemplar_extents.to_vec(),
        })
    }

    pub fn num_positions(&self) -> usize {
        self.positions.iter().product()
    }

    /// Input-space box of map index `flat` (row-major).
    pub fn box_for(&self, flat: usize) -> BBox {
        let coords = crate::tensor::unravel(flat, &self.positions);
        let offset: Vec<f64> =
            coords.iter().zip(&self.stride).map(|(&c, &s)| (c * s) as f64).collect();
        let extent: Vec<f64> = self.extent.iter().map(|&e| e as f64).collect();
        BBox::new(offset, extent).expect("positive extents")
    }

    pub fn all_boxes(&self) -> Vec<BBox> {
        (0..self.num_positions()).map(|l| self.box_for(l)).collect()
    }
}

/// Detached per-location similarity scores with their geometry.
#[derive(Clone, Debug)]
pub struct SimilarityMap {
    pub scores: Tensor,
    pub geometry: MapGeometry,
}

/// Detached summary of attention pooling over one similarity map.
#[derive(Clone, Debug)]
pub struct PairScore {
    pub y_hat: f64,
    pub weights: Vec<f64>,
    /// Argmax of the similarity scores, first index on ties.
    pub argmax_location: usize,
}

/// Records the similarity map between two embeddings on the tape. Inputs are
/// `[c, spatial...]` (use [`crate::net::embed_single`] to strip batch axes).
pub fn similarity_map(tape: &mut Tape, exemplar_emb: Var, target_emb: Var) -> Result<Var> {
    tape.cosine_similarity_map(exemplar_emb, target_emb)
}

/// Softmax attention weights of a similarity map at temperature `t`.
pub fn attention_weights(tape: &mut Tape, map: Var, t: f64) -> Result<Var> {
    let n = tape.value(map).numel();
    let flat = tape.reshape(map, vec![n])?;
    tape.softmax_temp(flat, t)
}

/// Attention-pooled pair score `sum_l w_l s_l`.
pub fn pair_score(tape: &mut Tape, map: Var, weights: Var) -> Result<Var> {
    tape.dot(weights, map)
}

/// Squared-error pair loss against a binary label.
pub fn pair_loss(tape: &mut Tape, score: Var, label: f64) -> Result<Var> {
    if label != 0.0 && label != 1.0 {
        return Err(Error::invalid(format!("pair label must be 0 or 1, got {label}")));
    }
    let diff = tape.affine(score, 1.0, -label);
    Ok(tape.square(diff))
}

/// Detaches a [`PairScore`] from tape values.
pub fn detach_pair_score(tape: &Tape, map: Var, weights: Var, score: Var) -> PairScore {
    PairScore {
        y_hat: tape.value(score).item(),
        weights: tape.value(weights).values().to_vec(),
        argmax_location: tape.value(map).argmax_flat(),
    }
}

// ---- Closed-form oracle, independent of the tape ----

/// Stable temperature softmax of a score slice.
pub fn attention_weights_of(scores: &[f64], t: f64) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| ((s - max) / t).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// `y_hat = sum_l w_l s_l` for given scores and weights.
pub fn pooled_score_of(scores: &[f64], weights: &[f64]) -> f64 {
    scores.iter().zip(weights).map(|(s, w)| s * w).sum()
}

/// Closed-form `d y_hat / d s_l = w_l (1 + (s_l - y_hat) / T)`.
pub fn pooled_score_gradient(scores: &[f64], t: f64) -> Vec<f64> {
    let w = attention_weights_of(scores, t);
    let y_hat = pooled_score_of(scores, &w);
    scores.iter().zip(&w).map(|(s, wl)| wl * (1.0 + (s - y_hat) / t)).collect()
}

/// Closed-form loss gradient
/// `d loss / d s_l = 2 (y_hat - y) w_l (1 + (s_l - y_hat) / T)`,
/// the independent oracle checked against the tape's reverse sweep.
pub fn loss_score_gradient(scores: &[f64], label: f64, t: f64) -> Vec<f64> {
    let w = attention_weights_of(scores, t);
    let y_hat = pooled_score_of(scores, &w);
    scores
        .iter()
        .zip(&w)
        .map(|(s, wl)| 2.0 * (y_hat - label) * wl * (1.0 + (s - y_hat) / t))
        .collect()
}

/// Reverse-mode gradient of the attention-pooled squared loss with respect to
/// the score vector, for oracle comparisons.
pub fn autograd_loss_score_gradient(scores: &[f64], label: f64, t: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::from_vec(scores.to_vec()), true);
    let w = tape.softmax_temp(s, t)?;
    let y_hat = tape.dot(w, s)?;
    let loss = pair_loss(&mut tape, y_hat, label)?;
    tape.backward(loss)?;
    Ok(tape.grad(s).expect("scores require grad").to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn constant_map_gives_uniform_weights_and_its_value_back() {
        let s = vec![0.4; 6];
        let w = attention_weights_of(&s, 1.0 / 3.0);
        assert!(w.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-12));
        assert!((pooled_score_of(&s, &w) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn two_point_weights_match_scalar_evaluation() {
        // s = [0.2, 0.9], T = 1/3: w_1 = 1 / (1 + e^{-2.1}).
        let w = attention_weights_of(&[0.2, 0.9], 1.0 / 3.0);
        let expected1 = 1.0 / (1.0 + (-2.1f64).exp());
        assert!((w[1] - expected1).abs() < 1e-12);
        assert!((w[0] - (1.0 - expected1)).abs() < 1e-12);
        assert!((w[0] - 0.1091).abs() < 1e-4);
        assert!((w[1] - 0.8909).abs() < 1e-4);

        let y_hat = pooled_score_of(&[0.2, 0.9], &w);
        assert!((y_hat - 0.8236).abs() < 1e-4);
    }

    #[test]
    fn softmax_temp_of_unit_gap_matches_the_stated_values() {
        // [0, 1] at T = 1/3: weights [1/(1+e^3), e^3/(1+e^3)].
        let w = attention_weights_of(&[0.0, 1.0], 1.0 / 3.0);
        let e3 = 3.0f64.exp();
        assert!((w[0] - 1.0 / (1.0 + e3)).abs() < 1e-15);
        assert!((w[1] - e3 / (1.0 + e3)).abs() < 1e-15);
        assert!((w[0] - 0.0474).abs() < 1e-4);
        assert!((w[1] - 0.9526).abs() < 1e-4);
    }

    #[test]
    fn tiny_temperature_concentrates_on_the_argmax() {
        let w = attention_weights_of(&[0.1, 0.7, 0.3], 1e-6);
        assert!(w[1] > 1.0 - 1e-9);
    }

    #[test]
    fn huge_temperature_flattens_to_uniform() {
        let w = attention_weights_of(&[0.0, 1.0, 0.25], 1e6);
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-5));
    }

    #[test]
    fn uniform_weights_average_the_scores() {
        let s = vec![0.0, 1.0];
        let w = attention_weights_of(&s, 1e9);
        assert!((pooled_score_of(&s, &w) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn pair_loss_values_and_gradient() {
        let mut tape = Tape::new();
        let y_hat = tape.leaf(Tensor::scalar(0.25), true);
        let loss = pair_loss(&mut tape, y_hat, 1.0).unwrap();
        assert!((tape.value(loss).item() - 0.5625).abs() < 1e-15);
        tape.backward(loss).unwrap();
        // d/dy (y - 1)^2 = 2 (y - 1) = -1.5.
        assert!((tape.grad(y_hat).unwrap()[0] + 1.5).abs() < 1e-15);

        let mut tape = Tape::new();
        let y_hat = tape.leaf(Tensor::scalar(1.0), true);
        let loss = pair_loss(&mut tape, y_hat, 1.0).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn score_gradient_components_sum_to_one() {
        let mut rng = rng_from(17);
        for _ in 0..50 {
            let n = rng.gen_range(2..30);
            let s: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            for t in [1.0 / 3.0, 1.0, 3.0] {
                let g = pooled_score_gradient(&s, t);
                let total: f64 = g.iter().sum();
                assert!((total - 1.0).abs() < 1e-9, "sum {total}");
            }
        }
    }

    #[test]
    fn constant_positive_map_gradient_is_uniform() {
        let c = 0.3;
        let s = vec![c; 8];
        let g = loss_score_gradient(&s, 1.0, 1.0 / 3.0);
        for &gi in &g {
            assert!((gi - 2.0 * (c - 1.0) / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_gradient_matches_autograd_tightly() {
        let mut rng = rng_from(23);
        for case in 0..100 {
            let n = rng.gen_range(2..=10);
            let s: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let t = [1.0 / 3.0, 1.0, 3.0][case % 3];
            let y = (case % 2) as f64;
            let analytic = loss_score_gradient(&s, y, t);
            let auto = autograd_loss_score_gradient(&s, y, t).unwrap();
            for (a, b) in analytic.iter().zip(&auto) {
                let err = (a - b).abs() / a.abs().max(1.0);
                assert!(err < 1e-9, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn geometry_boxes_tile_the_target_stride() {
        let cfg = EmbedConfig::desk(2, 1);
        let geom = MapGeometry::from_extents(&cfg, &[32, 32], &[64, 64]).unwrap();
        assert_eq!(geom.positions, vec![9, 9]);
        assert_eq!(geom.num_positions(), 81);
        let b0 = geom.box_for(0);
        assert_eq!(b0.offset, vec![0.0, 0.0]);
        assert_eq!(b0.extent, vec![32.0, 32.0]);
        let last = geom.box_for(80);
        assert_eq!(last.offset, vec![32.0, 32.0]);
        // The final box ends exactly at the target boundary.
        assert_eq!(last.end(0), 64.0);
        // Every index maps to exactly one box.
        let boxes = geom.all_boxes();
        for (i, b) in boxes.iter().enumerate() {
            assert_eq!(&geom.box_for(i), b);
        }
    }

    #[test]
    fn convexity_of_the_pooled_score() {
        let mut rng = rng_from(31);
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            let s: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 0.5).collect();
            let t = 0.2 + rng.gen::<f64>() * 3.0;
            let w = attention_weights_of(&s, t);
            let y = pooled_score_of(&s, &w);
            let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
    }

    #[test]
    fn restricted_self_reinforcement_ordering() {
        // For positive pairs with y_hat < 1: among locations with
        // s_l > s_m >= y_hat - T the negative gradient strictly favours the
        // higher score.
        let mut rng = rng_from(41);
        let mut checked = 0usize;
        for _ in 0..200 {
            let n = rng.gen_range(3..20);
            let s: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let t = [1.0 / 3.0, 1.0, 3.0][n % 3];
            let w = attention_weights_of(&s, t);
            let y_hat = pooled_score_of(&s, &w);
            if y_hat >= 1.0 {
                continue;
            }
            let g = loss_score_gradient(&s, 1.0, t);
            for l in 0..n {
                for m in 0..n {
                    if s[l] > s[m] && s[m] >= y_hat - t {
                        assert!(
                            -g[l] > -g[m],
                            "s_l {} s_m {} y_hat {y_hat} T {t}: -g_l {} vs -g_m {}",
                            s[l],
                            s[m],
                            -g[l],
                            -g[m]
                        );
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 1000, "only {checked} qualifying pairs");
    }
}
