//! Synthetic data for both tracks, episode construction, class-disjoint
//! splits, dataset persistence, and a loader for external image corpora.

mod episodes;
mod glyph;
mod loader;
mod sequence;
mod store;
mod tile;

pub use episodes::{build_nway_eval, build_training_pairs, SplitSpec, TrackConfig};
pub use glyph::{render_glyph, GlyphClass, GLYPH_SIZE};
pub use loader::load_image_dataset;
pub use sequence::{
    class_template, gen_sequence_target, sequence_instance, warp_resample, SequenceGenConfig,
    SequenceTarget,
};
pub use store::{DatasetManifest, EpisodeMeta, EvalSetManifest, StoredDataset, SynthDataset};
pub use tile::{tile_target, CellRecord, TiledTarget};

use serde::{Deserialize, Serialize};

use crate::eval::BBox;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Which input domain a dataset or run lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    Image,
    Sequence,
}

impl std::fmt::Display for Track {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Track::Image => write!(f, "image"),
            Track::Sequence => write!(f, "sequence"),
        }
    }
}

/// One exemplar-target pair with its binary label. The truth box exists for
/// evaluation only; training never reads it. `class_id` is bookkeeping and is
/// never fed to the model.
#[derive(Clone, Debug)]
pub struct Episode {
    pub id: u64,
    /// `[c, spatial...]`
    pub exemplar: Tensor,
    /// `[c, spatial...]`, spatially at least as large as the exemplar.
    pub target: Tensor,
    pub label: u8,
    pub truth_box: Option<BBox>,
    pub class_id: u64,
}

/// Maps stable class ids onto generator seeds.
#[derive(Clone, Copy, Debug)]
pub struct ClassCatalog {
    pub dataset_seed: u64,
}

impl ClassCatalog {
    pub fn new(dataset_seed: u64) -> Self {
        ClassCatalog { dataset_seed }
    }

    pub fn class_seed(&self, class_id: u64) -> u64 {
        derive_seed(self.dataset_seed, "class", class_id)
    }
}
