//! Per-exemplar linear classifiers over HOG features.
//!
//! One classifier is trained for every evaluation exemplar, separating that
//! single positive from the whole training split's exemplars under a
//! class-weighted, L2-regularised logistic objective (the positive weighted
//! 10, negatives 1e-4, bias feature fixed at 1). The trained weights are
//! then slid over the target image to score every window.

use crate::error::{Error, Result};
use crate::eval::{BBox, ScoredMap};
use crate::kernels::dot;
use crate::tensor::Tensor;

use super::hog::{cell_histograms, window_features, HogConfig};

#[derive(Clone, Copy, Debug)]
pub struct ExemplarClfConfig {
    /// Misclassification weight of the single positive.
    pub positive_weight: f64,
    /// Misclassification weight of each negative.
    pub negative_weight: f64,
    /// L2 regularisation strength on the weight vector.
    pub l2: f64,
    /// Constant bias feature appended to every descriptor.
    pub bias: f64,
    pub max_iterations: usize,
    /// Stop when the gradient's Euclidean norm falls below this.
    pub gradient_tolerance: f64,
}

impl Default for ExemplarClfConfig {
    fn default() -> Self {
        ExemplarClfConfig {
            positive_weight: 10.0,
            negative_weight: 1e-4,
            l2: 1.0,
            bias: 1.0,
            max_iterations: 5000,
            gradient_tolerance: 1e-6,
        }
    }
}

impl ExemplarClfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive_weight > 0.0) || !(self.negative_weight > 0.0) {
            return Err(Error::invalid("class weights must be positive".to_string()));
        }
        if !(self.l2 > 0.0) {
            return Err(Error::invalid("l2 strength must be positive".to_string()));
        }
        Ok(())
    }
}

/// Linear scorer over HOG descriptors; the bias feature's weight is folded in
/// as the last coefficient.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Raw (pre-logistic) score of a descriptor.
pub fn classifier_score(clf: &LinearClassifier, features: &[f64]) -> f64 {
    debug_assert_eq!(clf.weights.len(), features.len() + 1);
    dot(&clf.weights[..features.len()], features)
        + clf.weights[features.len()] * clf.bias
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `log(1 + exp(-z))`, computed stably.
fn log1p_exp_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

struct Objective<'a> {
    positive: &'a [f64],
    negatives: &'a [Vec<f64>],
    cfg: &'a ExemplarClfConfig,
}

impl Objective<'_> {
    fn dim(&self) -> usize {
        self.positive.len() + 1
    }

    fn margin(&self, w: &[f64], x: &[f64], y: f64) -> f64 {
        y * (dot(&w[..x.len()], x) + w[x.len()] * self.cfg.bias)
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let mut loss = 0.5 * self.cfg.l2 * dot(w, w);
        loss += self.cfg.positive_weight * log1p_exp_neg(self.margin(w, self.positive, 1.0));
        for n in self.negatives {
            loss += self.cfg.negative_weight * log1p_exp_neg(self.margin(w, n, -1.0));
        }
        loss
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = w.iter().map(|&v| self.cfg.l2 * v).collect();
        let mut add = |x: &[f64], y: f64, weight: f64, g: &mut Vec<f64>| {
            let m = self.margin(w, x, y);
            let coeff = -weight * y * logistic(-m);
            for (gi, &xi) in g.iter_mut().zip(x) {
                *gi += coeff * xi;
            }
            let d = x.len();
            g[d] += coeff * self.cfg.bias;
        };
        add(self.positive, 1.0, self.cfg.positive_weight, &mut g);
        for n in self.negatives {
            add(n, -1.0, self.cfg.negative_weight, &mut g);
        }
        g
    }
}

/// Trains the weighted L2-regularised logistic objective by accelerated
/// gradient descent with a monotone safeguard: a momentum step is kept only
/// when it lowers the loss, otherwise the iteration falls back to a
/// backtracking plain gradient step. The recorded loss trace is therefore
/// non-increasing. Stops when the gradient norm reaches the tolerance;
/// exceeding the iteration cap is an error.
pub fn train_exemplar_classifier(
    positive: &[f64],
    negatives: &[Vec<f64>],
    cfg: &ExemplarClfConfig,
) -> Result<(LinearClassifier, Vec<f64>)> {
    cfg.validate()?;
    if negatives.is_empty() {
        return Err(Error::invalid("need at least one negative exemplar".to_string()));
    }
    if negatives.iter().any(|n| n.len() != positive.len()) {
        return Err(Error::shape("negative descriptors must match the positive's length".to_string()));
    }

    let obj = Objective { positive, negatives, cfg };
    let dim = obj.dim();

    // Lipschitz bound of the gradient: l2 + 0.25 * sum_i C_i |x_i|^2.
    let mut lipschitz = cfg.l2;
    let aug = |x: &[f64]| dot(x, x) + cfg.bias * cfg.bias;
    lipschitz += 0.25 * cfg.positive_weight * aug(positive);
    for n in negatives {
        lipschitz += 0.25 * cfg.negative_weight * aug(n);
    }
    let base_step = 1.0 / lipschitz;

    let mut w = vec![0.0; dim];
    let mut prev_w = w.clone();
    let mut loss = obj.loss(&w);
    let mut trace = vec![loss];

    for iter in 0..cfg.max_iterations {
        let grad = obj.gradient(&w);
        let gnorm = dot(&grad, &grad).sqrt();
        if gnorm <= cfg.gradient_tolerance {
            return Ok((split_weights(w, cfg), trace));
        }

        // Momentum candidate from the two most recent iterates.
        let beta = iter as f64 / (iter + 3) as f64;
        let lookahead: Vec<f64> =
            w.iter().zip(&prev_w).map(|(cur, old)| cur + beta * (cur - old)).collect();
        let g_look = obj.gradient(&lookahead);
        let candidate: Vec<f64> =
            lookahead.iter().zip(&g_look).map(|(v, g)| v - base_step * g).collect();
        let cand_loss = obj.loss(&candidate);

        if cand_loss < loss {
            prev_w = std::mem::replace(&mut w, candidate);
            loss = cand_loss;
        } else {
            // Plain gradient step with backtracking keeps the trace monotone.
            let mut step = base_step;
            loop {
                let trial: Vec<f64> = w.iter().zip(&grad).map(|(v, g)| v - step * g).collect();
                let trial_loss = obj.loss(&trial);
                if trial_loss <= loss || step < 1e-18 {
                    prev_w = std::mem::replace(&mut w, trial);
                    loss = trial_loss.min(loss);
                    break;
                }
                step *= 0.5;
            }
        }
        trace.push(loss);
    }
    Err(Error::NotConverged(format!(
        "exemplar classifier: gradient norm {:.3e} after {} iterations (tolerance {:.1e})",
        dot(&obj.gradient(&w), &obj.gradient(&w)).sqrt(),
        cfg.max_iterations,
        cfg.gradient_tolerance
    )))
}

fn split_weights(w: Vec<f64>, cfg: &ExemplarClfConfig) -> LinearClassifier {
    LinearClassifier { weights: w, bias: cfg.bias }
}

/// Slides the classifier over every window of the target at a stride of one
/// cell, scoring windows through the logistic function. Window boxes are the
/// candidate detections.
pub fn exemplar_scan(
    clf: &LinearClassifier,
    target: &Tensor,
    hog: &HogConfig,
    window: usize,
) -> Result<ScoredMap> {
    let (h, w) = match target.shape() {
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::shape(format!("target must be [1, h, w], got {other:?}")))
        }
    };
    if h < window || w < window {
        return Err(Error::shape(format!(
            "target {h}x{w} is smaller than the {window}-pixel window"
        )));
    }
    let grid = cell_histograms(target, hog)?;
    let cells = window / hog.cell;
    let span_y = grid.cells_y + 1 - cells;
    let span_x = grid.cells_x + 1 - cells;

    let mut scores = Vec::with_capacity(span_y * span_x);
    let mut boxes = Vec::with_capacity(span_y * span_x);
    for cy in 0..span_y {
        for cx in 0..span_x {
            let feats = window_features(&grid, cy, cx, cells, hog);
            scores.push(logistic(classifier_score(clf, &feats)));
            boxes.push(BBox::rect(
                (cy * hog.cell) as f64,
                (cx * hog.cell) as f64,
                window as f64,
                window as f64,
            )?);
        }
    }
    let confidence = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ScoredMap { scores, boxes, confidence })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_glyph, tile_target, GlyphClass};
    use crate::rng::rng_from;
    use rand::Rng;

    fn toy_config() -> ExemplarClfConfig {
        ExemplarClfConfig { max_iterations: 20000, ..ExemplarClfConfig::default() }
    }

    #[test]
    fn separable_toy_problem_beats_the_zero_vector() {
        let positive = vec![2.0, 0.5];
        let negatives = vec![vec![-1.0, -0.5], vec![-2.0, 0.3], vec![-0.5, -1.5]];
        let cfg = toy_config();
        let (clf, trace) = train_exemplar_classifier(&positive, &negatives, &cfg).unwrap();

        let obj = Objective { positive: &positive, negatives: &negatives, cfg: &cfg };
        let zero_loss = obj.loss(&vec![0.0; 3]);
        assert!(trace.last().unwrap() < &zero_loss);

        let pos_score = classifier_score(&clf, &positive);
        for n in &negatives {
            assert!(pos_score > classifier_score(&clf, n));
        }
    }

    #[test]
    fn loss_trace_is_monotone_non_increasing() {
        let mut rng = rng_from(5);
        let positive: Vec<f64> = (0..20).map(|_| rng.gen::<f64>()).collect();
        let negatives: Vec<Vec<f64>> =
            (0..30).map(|_| (0..20).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        let (_, trace) = train_exemplar_classifier(&positive, &negatives, &toy_config()).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn weight_scaling_keeps_the_hardest_negative() {
        // Doubling both class weights and halving the regulariser rescales
        // the objective's balance but must not change which negative scores
        // highest on separable data.
        let mut rng = rng_from(9);
        let positive: Vec<f64> = (0..8).map(|_| 0.8 + rng.gen::<f64>() * 0.2).collect();
        let negatives: Vec<Vec<f64>> =
            (0..12).map(|_| (0..8).map(|_| rng.gen::<f64>() * 0.5 - 0.6).collect()).collect();

        let base = toy_config();
        let scaled = ExemplarClfConfig {
            positive_weight: base.positive_weight * 2.0,
            negative_weight: base.negative_weight * 2.0,
            l2: base.l2 / 2.0,
            ..base
        };
        let argmax_negative = |cfg: &ExemplarClfConfig| {
            let (clf, _) = train_exemplar_classifier(&positive, &negatives, cfg).unwrap();
            (0..negatives.len())
                .max_by(|&a, &b| {
                    classifier_score(&clf, &negatives[a])
                        .partial_cmp(&classifier_score(&clf, &negatives[b]))
                        .unwrap()
                })
                .unwrap()
        };
        assert_eq!(argmax_negative(&base), argmax_negative(&scaled));
    }

    #[test]
    fn needs_at_least_one_negative() {
        assert!(train_exemplar_classifier(&[1.0], &[], &toy_config()).is_err());
    }

    #[test]
    fn scan_grid_shape_follows_window_arithmetic() {
        // 64x64 target, 32-pixel window, 4-pixel cells: a 9x9 grid.
        let clf = LinearClassifier { weights: vec![0.0; 49 * 36 + 1], bias: 1.0 };
        let target = Tensor::zeros(vec![1, 64, 64]);
        let scan = exemplar_scan(&clf, &target, &HogConfig::default(), 32).unwrap();
        assert_eq!(scan.scores.len(), 81);
        assert_eq!(scan.boxes[0].offset, vec![0.0, 0.0]);
        assert_eq!(scan.boxes[80].offset, vec![32.0, 32.0]);
        assert!(scan.scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
    }

    #[test]
    fn scan_peaks_at_the_exemplar_cell() {
        // Train on the exact exemplar HOG, paste the same instance into a
        // tiled target, and check the argmax window is its cell.
        let hog = HogConfig::default();
        let classes: Vec<(u64, GlyphClass)> =
            (0..4).map(|i| (i, GlyphClass::from_seed(1000 + i))).collect();
        let seeds = vec![11, 12, 13, 14];
        let tiled = tile_target(&classes, &seeds, 2, 77).unwrap();
        let wanted = 2u64;
        let exemplar_img = render_glyph(&classes[wanted as usize].1, seeds[wanted as usize]);
        let positive = hog_features_of(&exemplar_img, &hog);
        let negatives: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let c = GlyphClass::from_seed(5000 + i);
                hog_features_of(&render_glyph(&c, 1), &hog)
            })
            .collect();
        let (clf, _) = train_exemplar_classifier(&positive, &negatives, &toy_config()).unwrap();
        let scan = exemplar_scan(&clf, &tiled.image, &hog, 32).unwrap();
        let best = scan.argmax();
        let cell = tiled.cells.iter().find(|c| c.class_id == wanted).unwrap();
        assert_eq!(scan.boxes[best].offset, cell.bbox.offset);
    }

    fn hog_features_of(img: &Tensor, cfg: &HogConfig) -> Vec<f64> {
        super::super::hog::hog_features(img, cfg).unwrap()
    }
}
