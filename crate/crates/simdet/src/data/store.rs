//! Dataset persistence: a JSON manifest plus one binary tensor file per
//! episode, in the same named-tensor format as model checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::episodes::{SplitSpec, TrackConfig};
use super::{Episode, Track};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::BBox;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub id: u64,
    pub file: String,
    pub label: u8,
    pub class_id: u64,
    pub truth_box: Option<BBox>,
    pub target_extent: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSetManifest {
    pub name: String,
    pub split: String,
    pub n_way: usize,
    pub episodes: Vec<EpisodeMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub track: Track,
    pub seed: u64,
    pub track_config: TrackConfig,
    pub splits: SplitSpec,
    pub train_episodes: Vec<EpisodeMeta>,
    pub eval_sets: Vec<EvalSetManifest>,
}

/// A freshly synthesised dataset still in memory.
pub struct SynthDataset {
    pub seed: u64,
    pub track_config: TrackConfig,
    pub splits: SplitSpec,
    pub train: Vec<Episode>,
    /// `(name, split, n_way, episodes)`
    pub eval_sets: Vec<(String, String, usize, Vec<Episode>)>,
}

fn meta_of(ep: &Episode) -> EpisodeMeta {
    EpisodeMeta {
        id: ep.id,
        file: format!("episodes/ep{:06}.bin", ep.id),
        label: ep.label,
        class_id: ep.class_id,
        truth_box: ep.truth_box.clone(),
        target_extent: ep.target.shape()[1..].to_vec(),
    }
}

fn write_episode(dir: &Path, meta: &EpisodeMeta, ep: &Episode) -> Result<()> {
    let entries = vec![
        ("exemplar".to_string(), ep.exemplar.clone()),
        ("target".to_string(), ep.target.clone()),
    ];
    checkpoint::save_file(dir.join(&meta.file), &entries)
}

impl SynthDataset {
    /// Writes the manifest and every episode under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("episodes"))?;
        let train_meta: Vec<EpisodeMeta> = self.train.iter().map(meta_of).collect();
        for (meta, ep) in train_meta.iter().zip(&self.train) {
            write_episode(dir, meta, ep)?;
        }
        let mut eval_sets = Vec::new();
        for (name, split, n_way, eps) in &self.eval_sets {
            let metas: Vec<EpisodeMeta> = eps.iter().map(meta_of).collect();
            for (meta, ep) in metas.iter().zip(eps) {
                write_episode(dir, meta, ep)?;
            }
            eval_sets.push(EvalSetManifest {
                name: name.clone(),
                split: split.clone(),
                n_way: *n_way,
                episodes: metas,
            });
        }
        let manifest = DatasetManifest {
            format_version: 1,
            track: self.track_config.track(),
            seed: self.seed,
            track_config: self.track_config.clone(),
            splits: self.splits.clone(),
            train_episodes: train_meta,
            eval_sets,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }
}

/// A dataset directory opened for reading.
pub struct StoredDataset {
    pub manifest: DatasetManifest,
    dir: PathBuf,
}

impl StoredDataset {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != 1 {
            return Err(Error::Format(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }
        Ok(StoredDataset { manifest, dir })
    }

    pub fn eval_set(&self, name: &str) -> Option<&EvalSetManifest> {
        self.manifest.eval_sets.iter().find(|s| s.name == name)
    }

    pub fn load_episode(&self, meta: &EpisodeMeta) -> Result<Episode> {
        let tensors = checkpoint::load_file(self.dir.join(&meta.file))?;
        let mut exemplar = None;
        let mut target = None;
        for (name, tensor) in tensors {
            match name.as_str() {
                "exemplar" => exemplar = Some(tensor),
                "target" => target = Some(tensor),
                other => {
                    return Err(Error::Format(format!(
                        "unexpected tensor {other:?} in {}",
                        meta.file
                    )))
                }
            }
        }
        Ok(Episode {
            id: meta.id,
            exemplar: exemplar
                .ok_or_else(|| Error::Format(format!("{} lacks an exemplar tensor", meta.file)))?,
            target: target
                .ok_or_else(|| Error::Format(format!("{} lacks a target tensor", meta.file)))?,
            label: meta.label,
            truth_box: meta.truth_box.clone(),
            class_id: meta.class_id,
        })
    }

    pub fn load_episodes(&self, metas: &[EpisodeMeta]) -> Result<Vec<Episode>> {
        metas.iter().map(|m| self.load_episode(m)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::episodes::{build_nway_eval, build_training_pairs};
    use super::super::ClassCatalog;
    use super::*;

    #[test]
    fn save_and_reload_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let catalog = ClassCatalog::new(5);
        let splits = SplitSpec::from_counts(8, 6, 6);
        let track = TrackConfig::Image { grid_n: 2 };
        let train = build_training_pairs(&catalog, &splits, 6, &track, 1, 0).unwrap();
        let eval = build_nway_eval(&catalog, &splits.test, 2, 2, &track, 2, 100).unwrap();
        let ds = SynthDataset {
            seed: 5,
            track_config: track,
            splits,
            train,
            eval_sets: vec![("test_2way".to_string(), "test".to_string(), 2, eval)],
        };
        ds.save(tmp.path()).unwrap();

        let stored = StoredDataset::open(tmp.path()).unwrap();
        assert_eq!(stored.manifest.train_episodes.len(), 6);
        let set = stored.eval_set("test_2way").unwrap().clone();
        assert_eq!(set.n_way, 2);
        let eps = stored.load_episodes(&set.episodes).unwrap();
        assert_eq!(eps.len(), 4);
        for (ep, meta) in eps.iter().zip(&set.episodes) {
            assert_eq!(ep.id, meta.id);
            assert_eq!(ep.label, meta.label);
            assert_eq!(&ep.target.shape()[1..], meta.target_extent.as_slice());
        }
        // Byte-for-byte identical to the in-memory originals.
        let original = &ds.eval_sets[0].3[0];
        let reloaded = &eps[0];
        assert_eq!(
            original.target.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            reloaded.target.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn missing_manifest_is_a_clean_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(StoredDataset::open(tmp.path()).is_err());
    }
}
