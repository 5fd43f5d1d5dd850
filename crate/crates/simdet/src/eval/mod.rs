//! Detection evaluation: boxes, pooled average precision, precision at fixed
//! recall, postprocess calibration and AP-vs-IoU sweeps.

mod boxes;
mod detect;
mod metrics;

pub use boxes::{iou, BBox};
pub use detect::{
    calibrate_postprocess, emit_detections, score_episodes, truths_of, Detection,
    PostprocessParams, ScoredEpisode, ScoredMap, Scorer,
};
pub use metrics::{
    ap_iou_sweep, average_precision, precision_at_recall, pr_curve, EpisodeTruth, EvalReport,
    PrPoint,
};
