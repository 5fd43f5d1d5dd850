//! [`Scorer`] implementations: the similarity network, the two baselines,
//! and a random-confidence diagnostic. All of them emit the shared
//! [`ScoredMap`] shape, so the evaluator is model-agnostic.

use rand::Rng;

use crate::baseline::{
    dtw_scan, exemplar_scan, hog_features, train_exemplar_classifier, DtwConfig,
    ExemplarClfConfig, HogConfig,
};
use crate::data::{ClassCatalog, Episode, GlyphClass};
use crate::error::{Error, Result};
use crate::eval::{ScoredMap, Scorer};
use crate::net::{embed_single, EmbedConfig, ModelState};
use crate::rng::{derive_seed, rng_from};
use crate::scoring::{self, MapGeometry};
use crate::tape::{Mode, RunningMoments, Tape};

/// Scores episodes with a trained attention similarity network in inference
/// mode. Parameters are frozen; scoring is pure and safe to run in parallel.
pub struct SimnetScorer {
    pub config: EmbedConfig,
    pub state: ModelState,
}

impl SimnetScorer {
    pub fn new(config: EmbedConfig, state: ModelState) -> Self {
        SimnetScorer { config, state }
    }
}

impl Scorer for SimnetScorer {
    fn score_episode(&self, episode: &Episode) -> Result<ScoredMap> {
        // Inference never updates running moments; the copy keeps `&self`.
        let mut moments: Vec<RunningMoments> = self.state.moments.clone();
        let mut tape = Tape::new();
        let ex = embed_single(
            &mut tape,
            &episode.exemplar,
            &self.config,
            &self.state.params,
            &mut moments,
            Mode::Infer,
        )?;
        let tg = embed_single(
            &mut tape,
            &episode.target,
            &self.config,
            &self.state.params,
            &mut moments,
            Mode::Infer,
        )?;
        let map = scoring::similarity_map(&mut tape, ex, tg)?;
        let weights = scoring::attention_weights(&mut tape, map, self.config.temperature)?;
        let n = tape.value(map).numel();
        let flat = tape.reshape(map, vec![n])?;
        let score = scoring::pair_score(&mut tape, flat, weights)?;

        let geometry = MapGeometry::from_extents(
            &self.config,
            &episode.exemplar.shape()[1..],
            &episode.target.shape()[1..],
        )?;
        Ok(ScoredMap {
            scores: tape.value(map).values().to_vec(),
            boxes: geometry.all_boxes(),
            confidence: tape.value(score).item(),
        })
    }
}

/// Dynamic time warping over feature sequences (sequence track only).
pub struct DtwScorer {
    pub config: DtwConfig,
}

impl Scorer for DtwScorer {
    fn score_episode(&self, episode: &Episode) -> Result<ScoredMap> {
        if episode.exemplar.rank() != 2 {
            return Err(Error::invalid(
                "the DTW baseline runs on the sequence track only".to_string(),
            ));
        }
        dtw_scan(&episode.exemplar, &episode.target, &self.config)
    }
}

/// HOG + per-exemplar linear classifier (image track only). Negatives are the
/// HOG descriptors of one instance of every training-split class.
pub struct ExemplarScorer {
    pub hog: HogConfig,
    pub clf: ExemplarClfConfig,
    pub window: usize,
    negatives: Vec<Vec<f64>>,
}

impl ExemplarScorer {
    /// Builds the negative pool from the training split of a dataset.
    pub fn from_training_split(
        catalog: &ClassCatalog,
        train_classes: &[u64],
        hog: HogConfig,
        clf: ExemplarClfConfig,
    ) -> Result<Self> {
        if train_classes.is_empty() {
            return Err(Error::invalid("exemplar baseline needs training classes".to_string()));
        }
        let negatives = train_classes
            .iter()
            .map(|&c| {
                let img = crate::data::render_glyph(
                    &GlyphClass::from_seed(catalog.class_seed(c)),
                    derive_seed(catalog.dataset_seed, "baseline-negative", c),
                );
                hog_features(&img, &hog)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExemplarScorer { hog, clf, window: 32, negatives })
    }

    /// Builds the negative pool from explicit images.
    pub fn from_negative_images(
        images: &[crate::tensor::Tensor],
        hog: HogConfig,
        clf: ExemplarClfConfig,
    ) -> Result<Self> {
        let negatives =
            images.iter().map(|img| hog_features(img, &hog)).collect::<Result<Vec<_>>>()?;
        Ok(ExemplarScorer { hog, clf, window: 32, negatives })
    }
}

impl Scorer for ExemplarScorer {
    fn score_episode(&self, episode: &Episode) -> Result<ScoredMap> {
        if episode.exemplar.rank() != 3 {
            return Err(Error::invalid(
                "the exemplar-classifier baseline runs on the image track only".to_string(),
            ));
        }
        let positive = hog_features(&episode.exemplar, &self.hog)?;
        let (clf, _) = train_exemplar_classifier(&positive, &self.negatives, &self.clf)?;
        exemplar_scan(&clf, &episode.target, &self.hog, self.window)
    }
}

/// Random confidences at random grid locations: the floor any learning method
/// has to clear. Uses the similarity network's location grid so boxes are
/// comparable.
pub struct RandomScorer {
    pub seed: u64,
    pub config: EmbedConfig,
}

impl Scorer for RandomScorer {
    fn score_episode(&self, episode: &Episode) -> Result<ScoredMap> {
        let geometry = MapGeometry::from_extents(
            &self.config,
            &episode.exemplar.shape()[1..],
            &episode.target.shape()[1..],
        )?;
        let mut rng = rng_from(derive_seed(self.seed, "random-scorer", episode.id));
        let scores: Vec<f64> = (0..geometry.num_positions()).map(|_| rng.gen()).collect();
        let confidence = rng.gen();
        Ok(ScoredMap { scores, boxes: geometry.all_boxes(), confidence })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_nway_eval, SequenceGenConfig, SplitSpec, TrackConfig};
    use crate::eval::score_episodes;

    #[test]
    fn dtw_scorer_rejects_images() {
        let catalog = ClassCatalog::new(1);
        let split = SplitSpec::from_counts(8, 5, 5);
        let eps = build_nway_eval(
            &catalog,
            &split.test,
            2,
            1,
            &TrackConfig::Image { grid_n: 2 },
            3,
            0,
        )
        .unwrap();
        let scorer = DtwScorer { config: DtwConfig::default() };
        assert!(scorer.score_episode(&eps[0]).is_err());
    }

    #[test]
    fn random_scorer_is_deterministic_and_well_formed() {
        let catalog = ClassCatalog::new(2);
        let split = SplitSpec::from_counts(8, 5, 5);
        let track = TrackConfig::Sequence(SequenceGenConfig::default());
        let eps = build_nway_eval(&catalog, &split.test, 3, 2, &track, 7, 0).unwrap();
        let scorer = RandomScorer { seed: 11, config: EmbedConfig::desk(1, 16) };
        let a = score_episodes(&scorer, &eps, false).unwrap();
        let b = score_episodes(&scorer, &eps, true).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.confidence.to_bits(), y.confidence.to_bits());
            assert_eq!(x.argmax_box, y.argmax_box);
        }
    }
}
