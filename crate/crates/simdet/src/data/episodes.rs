//! Balanced training pairs and N-way evaluation sets over class-disjoint
//! splits. Every episode is a pure function of the dataset seed and its
//! index.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::glyph::{GlyphClass, GLYPH_SIZE};
use super::sequence::{gen_sequence_target, sequence_instance, SequenceGenConfig};
use super::tile::tile_target;
use super::{ClassCatalog, Episode, Track};
use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::rng::{derive_seed, rng_from};

/// Pairwise-disjoint class-id sets for training, validation and test. The
/// held-out sets realise the one-shot condition: no evaluation class is ever
/// seen in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitSpec {
    /// Sequential class ids split into three blocks.
    pub fn from_counts(train: usize, validation: usize, test: usize) -> Self {
        let mut next = 0u64;
        let mut take = |n: usize| -> Vec<u64> {
            let ids = (next..next + n as u64).collect();
            next += n as u64;
            ids
        };
        SplitSpec { train: take(train), validation: take(validation), test: take(test) }
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.train.len() + self.validation.len() + self.test.len();
        let distinct: BTreeSet<u64> = self
            .train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .copied()
            .collect();
        if distinct.len() != total {
            return Err(Error::invalid("splits must be pairwise disjoint".to_string()));
        }
        Ok(())
    }
}

/// Track-specific generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrackConfig {
    Image { grid_n: usize },
    Sequence(SequenceGenConfig),
}

impl TrackConfig {
    pub fn track(&self) -> Track {
        match self {
            TrackConfig::Image { .. } => Track::Image,
            TrackConfig::Sequence(_) => Track::Sequence,
        }
    }
}

/// `count` distinct choices from `pool` excluding `without`.
fn sample_distinct(
    rng: &mut rand_chacha::ChaCha8Rng,
    pool: &[u64],
    without: &BTreeSet<u64>,
    count: usize,
) -> Result<Vec<u64>> {
    let candidates: Vec<u64> = pool.iter().copied().filter(|c| !without.contains(c)).collect();
    if candidates.len() < count {
        return Err(Error::invalid(format!(
            "need {count} distinct classes but only {} are available",
            candidates.len()
        )));
    }
    let mut picked = candidates;
    picked.partial_shuffle(rng, count);
    picked.truncate(count);
    Ok(picked)
}

fn image_episode(
    catalog: &ClassCatalog,
    exemplar_class: u64,
    pool: &[u64],
    grid_n: usize,
    positive: bool,
    id: u64,
    ep_seed: u64,
) -> Result<Episode> {
    let mut rng = rng_from(derive_seed(ep_seed, "image-episode", 0));
    let cells_needed = grid_n * grid_n;
    let mut excluded = BTreeSet::new();
    excluded.insert(exemplar_class);
    let mut cell_classes = if positive {
        let mut v = vec![exemplar_class];
        v.extend(sample_distinct(&mut rng, pool, &excluded, cells_needed - 1)?);
        v
    } else {
        sample_distinct(&mut rng, pool, &excluded, cells_needed)?
    };
    cell_classes.shuffle(&mut rng);

    let classes: Vec<(u64, GlyphClass)> = cell_classes
        .iter()
        .map(|&c| (c, GlyphClass::from_seed(catalog.class_seed(c))))
        .collect();
    // The instance embedded in the target is never the exemplar's instance:
    // the seeds come from different derivation tags.
    let instance_seeds: Vec<u64> = cell_classes
        .iter()
        .map(|&c| derive_seed(ep_seed, "target-instance", c))
        .collect();
    let tiled = tile_target(&classes, &instance_seeds, grid_n, derive_seed(ep_seed, "perm", 0))?;

    let truth_box = if positive {
        Some(
            tiled
                .cells
                .iter()
                .find(|c| c.class_id == exemplar_class)
                .expect("positive target contains the exemplar class")
                .bbox
                .clone(),
        )
    } else {
        None
    };

    let exemplar_inst = derive_seed(ep_seed, "exemplar-instance", 0);
    let exemplar = super::glyph::render_glyph(
        &GlyphClass::from_seed(catalog.class_seed(exemplar_class)),
        exemplar_inst,
    );

    Ok(Episode {
        id,
        exemplar,
        target: tiled.image,
        label: positive as u8,
        truth_box,
        class_id: exemplar_class,
    })
}

fn sequence_episode(
    catalog: &ClassCatalog,
    exemplar_class: u64,
    pool: &[u64],
    config: &SequenceGenConfig,
    positive: bool,
    id: u64,
    ep_seed: u64,
) -> Result<Episode> {
    let mut rng = rng_from(derive_seed(ep_seed, "sequence-episode", 0));
    let mut excluded = BTreeSet::new();
    excluded.insert(exemplar_class);
    let distractors: Vec<u64> = sample_distinct(
        &mut rng,
        pool,
        &excluded,
        config.distractors.min(pool.len().saturating_sub(1)),
    )?
    .iter()
    .map(|&c| catalog.class_seed(c))
    .collect();

    let target = gen_sequence_target(
        positive.then(|| catalog.class_seed(exemplar_class)),
        &distractors,
        derive_seed(ep_seed, "target", 0),
        config,
    )?;
    let truth_box = match (&target.embedded, positive) {
        (Some((_, (start, len))), true) => Some(BBox::interval(*start as f64, *len as f64)?),
        _ => None,
    };

    let exemplar = sequence_instance(
        catalog.class_seed(exemplar_class),
        derive_seed(ep_seed, "exemplar-instance", 0),
        config,
    );

    Ok(Episode {
        id,
        exemplar,
        target: target.features,
        label: positive as u8,
        truth_box,
        class_id: exemplar_class,
    })
}

fn episode_for(
    catalog: &ClassCatalog,
    exemplar_class: u64,
    pool: &[u64],
    track: &TrackConfig,
    positive: bool,
    id: u64,
    ep_seed: u64,
) -> Result<Episode> {
    match track {
        TrackConfig::Image { grid_n } => {
            image_episode(catalog, exemplar_class, pool, *grid_n, positive, id, ep_seed)
        }
        TrackConfig::Sequence(cfg) => {
            sequence_episode(catalog, exemplar_class, pool, cfg, positive, id, ep_seed)
        }
    }
}

/// Builds `count` training episodes with equally many positive and negative
/// pairs, all classes drawn from the training split.
pub fn build_training_pairs(
    catalog: &ClassCatalog,
    split: &SplitSpec,
    count: usize,
    track: &TrackConfig,
    base_seed: u64,
    first_id: u64,
) -> Result<Vec<Episode>> {
    split.validate()?;
    if split.train.is_empty() {
        return Err(Error::invalid("training split has no classes".to_string()));
    }
    if count == 0 || count % 2 != 0 {
        return Err(Error::invalid(format!(
            "training pair count must be even and positive, got {count}"
        )));
    }
    (0..count)
        .map(|k| {
            let ep_seed = derive_seed(base_seed, "train-episode", k as u64);
            let mut rng = rng_from(derive_seed(ep_seed, "pick-class", 0));
            let class = split.train[rng.gen_range(0..split.train.len())];
            let positive = k % 2 == 0;
            episode_for(catalog, class, &split.train, track, positive, first_id + k as u64, ep_seed)
        })
        .collect()
}

/// Builds an N-way one-shot evaluation set over `pool` (a validation or test
/// split): for each of `num_targets` targets, N episodes share the target and
/// exactly one of them is positive. Negative exemplar classes never occur
/// anywhere in the target.
pub fn build_nway_eval(
    catalog: &ClassCatalog,
    pool: &[u64],
    n_way: usize,
    num_targets: usize,
    track: &TrackConfig,
    base_seed: u64,
    first_id: u64,
) -> Result<Vec<Episode>> {
    if n_way < 2 {
        return Err(Error::invalid(format!("n-way needs at least 2 exemplars, got {n_way}")));
    }
    // The target occupies some classes on top of the N exemplar classes.
    let occupied = match track {
        TrackConfig::Image { grid_n } => grid_n * grid_n - 1,
        TrackConfig::Sequence(cfg) => cfg.distractors,
    };
    if n_way + occupied > pool.len() {
        return Err(Error::invalid(format!(
            "{n_way}-way evaluation over a {}-class split needs at least {} classes \
             ({n_way} exemplars plus {occupied} target fillers)",
            pool.len(),
            n_way + occupied
        )));
    }

    let mut episodes = Vec::with_capacity(n_way * num_targets);
    let mut next_id = first_id;
    for t in 0..num_targets {
        let target_seed = derive_seed(base_seed, "nway-target", t as u64);
        let mut rng = rng_from(derive_seed(target_seed, "pick-classes", 0));
        let picked = sample_distinct(&mut rng, pool, &BTreeSet::new(), n_way)?;
        let positive_class = picked[0];
        // Build the shared target once, via the positive episode; filler
        // classes must avoid every exemplar class of this group.
        let filler_pool: Vec<u64> =
            pool.iter().copied().filter(|c| !picked.contains(c) || *c == positive_class).collect();
        let positive_episode = episode_for(
            catalog,
            positive_class,
            &filler_pool,
            track,
            true,
            0, // assigned below
            derive_seed(target_seed, "target-episode", 0),
        )?;

        let mut group: Vec<Episode> = Vec::with_capacity(n_way);
        for (i, &class) in picked.iter().enumerate() {
            let mut ep = positive_episode.clone();
            ep.id = next_id;
            next_id += 1;
            if i == 0 {
                group.push(ep);
                continue;
            }
            ep.class_id = class;
            ep.label = 0;
            ep.truth_box = None;
            ep.exemplar = match track {
                TrackConfig::Image { .. } => super::glyph::render_glyph(
                    &GlyphClass::from_seed(catalog.class_seed(class)),
                    derive_seed(target_seed, "negative-exemplar", i as u64),
                ),
                TrackConfig::Sequence(cfg) => sequence_instance(
                    catalog.class_seed(class),
                    derive_seed(target_seed, "negative-exemplar", i as u64),
                    cfg,
                ),
            };
            group.push(ep);
        }
        episodes.extend(group);
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn catalog() -> ClassCatalog {
        ClassCatalog::new(99)
    }

    fn image_track() -> TrackConfig {
        TrackConfig::Image { grid_n: 2 }
    }

    #[test]
    fn splits_are_disjoint_by_construction() {
        let s = SplitSpec::from_counts(60, 20, 20);
        s.validate().unwrap();
        assert_eq!(s.train.len(), 60);
        assert!(s.validation.iter().all(|c| !s.train.contains(c)));
        assert!(s.test.iter().all(|c| !s.train.contains(c) && !s.validation.contains(c)));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let s = SplitSpec { train: vec![0, 1], validation: vec![1], test: vec![2] };
        assert!(s.validate().is_err());
    }

    #[test]
    fn training_pairs_are_balanced_and_in_split() {
        let split = SplitSpec::from_counts(12, 4, 4);
        let eps =
            build_training_pairs(&catalog(), &split, 100, &image_track(), 5, 0).unwrap();
        assert_eq!(eps.len(), 100);
        assert_eq!(eps.iter().filter(|e| e.label == 1).count(), 50);
        assert_eq!(eps.iter().filter(|e| e.label == 0).count(), 50);
        assert!(eps.iter().all(|e| split.train.contains(&e.class_id)));
    }

    #[test]
    fn odd_or_zero_counts_are_rejected() {
        let split = SplitSpec::from_counts(12, 4, 4);
        assert!(build_training_pairs(&catalog(), &split, 3, &image_track(), 5, 0).is_err());
        assert!(build_training_pairs(&catalog(), &split, 0, &image_track(), 5, 0).is_err());
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let split = SplitSpec { train: vec![], validation: vec![0], test: vec![1] };
        assert!(build_training_pairs(&catalog(), &split, 2, &image_track(), 5, 0).is_err());
    }

    #[test]
    fn positive_image_episodes_place_a_distinct_instance_of_the_class() {
        let split = SplitSpec::from_counts(12, 4, 4);
        let eps = build_training_pairs(&catalog(), &split, 20, &image_track(), 7, 0).unwrap();
        for ep in eps.iter().filter(|e| e.label == 1) {
            let tb = ep.truth_box.as_ref().expect("positive episodes carry a truth box");
            // The cell under the truth box must not be a byte-for-byte copy of
            // the exemplar (different instance of the same class).
            let side = ep.target.shape()[1];
            let (y0, x0) = (tb.offset[0] as usize, tb.offset[1] as usize);
            let mut identical = true;
            for y in 0..GLYPH_SIZE {
                for x in 0..GLYPH_SIZE {
                    if ep.target.values()[(y0 + y) * side + x0 + x]
                        != ep.exemplar.values()[y * GLYPH_SIZE + x]
                    {
                        identical = false;
                    }
                }
            }
            assert!(!identical, "episode {} embeds the exemplar instance itself", ep.id);
        }
    }

    #[test]
    fn nway_groups_share_target_and_have_one_positive() {
        let split = SplitSpec::from_counts(12, 8, 8);
        let eps = build_nway_eval(&catalog(), &split.test, 5, 4, &image_track(), 3, 100).unwrap();
        assert_eq!(eps.len(), 20);
        let mut by_target: BTreeMap<Vec<u64>, Vec<&Episode>> = BTreeMap::new();
        for ep in &eps {
            let key: Vec<u64> = ep.target.values().iter().map(|v| v.to_bits()).collect();
            by_target.entry(key).or_default().push(ep);
        }
        assert_eq!(by_target.len(), 4, "4 distinct targets");
        for group in by_target.values() {
            assert_eq!(group.len(), 5);
            let positives: u8 = group.iter().map(|e| e.label).sum();
            assert_eq!(positives, 1);
            assert!(group.iter().all(|e| split.test.contains(&e.class_id)));
        }
    }

    #[test]
    fn nway_rejects_oversized_n() {
        let split = SplitSpec::from_counts(12, 4, 4);
        assert!(build_nway_eval(&catalog(), &split.test, 5, 2, &image_track(), 3, 0).is_err());
    }

    #[test]
    fn sequence_track_builds_well_formed_episodes() {
        let split = SplitSpec::from_counts(12, 6, 6);
        let track = TrackConfig::Sequence(SequenceGenConfig::default());
        let eps = build_nway_eval(&catalog(), &split.validation, 3, 3, &track, 11, 0).unwrap();
        assert_eq!(eps.len(), 9);
        for ep in &eps {
            assert_eq!(ep.target.shape(), &[16, 200]);
            assert_eq!(ep.exemplar.shape()[0], 16);
            if ep.label == 1 {
                let tb = ep.truth_box.as_ref().unwrap();
                assert!(tb.end(0) <= 200.0);
            } else {
                assert!(ep.truth_box.is_none());
            }
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_seeds() {
        let split = SplitSpec::from_counts(12, 4, 4);
        let a = build_training_pairs(&catalog(), &split, 10, &image_track(), 5, 0).unwrap();
        let b = build_training_pairs(&catalog(), &split, 10, &image_track(), 5, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                x.target.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.target.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(x.label, y.label);
            assert_eq!(x.class_id, y.class_id);
        }
    }
}
