//! The two training-free-or-classical baselines the similarity network is
//! compared against: dynamic time warping for the sequence track, and HOG
//! features with a per-exemplar linear classifier for the image track.

pub mod dtw;
pub mod exemplar;
pub mod hog;

pub use dtw::{dtw_cost, dtw_scan, dtw_similarity, DtwConfig};
pub use exemplar::{
    classifier_score, exemplar_scan, train_exemplar_classifier, ExemplarClfConfig,
    LinearClassifier,
};
pub use hog::{cell_histograms, hog_features, window_features, CellGrid, HogConfig};
