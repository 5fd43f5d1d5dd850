//! Run configuration: a flat, documented `key = value` text format plus the
//! defaults for both tracks. A run is reproducible from its config and seed
//! alone.

use std::path::PathBuf;

use crate::data::{SequenceGenConfig, Track};
use crate::error::{Error, Result};
use crate::net::EmbedConfig;

/// Which embedding preset to instantiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::invalid(format!("unknown preset {other:?} (desk | paper)"))),
        }
    }
}

/// Everything a run needs: data synthesis, model, training and evaluation
/// parameters.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub track: Track,
    pub seed: u64,
    pub out_dir: PathBuf,

    pub classes_train: usize,
    pub classes_validation: usize,
    pub classes_test: usize,
    pub grid_n: usize,
    pub n_way: Vec<usize>,
    pub train_episodes: usize,
    pub eval_targets_validation: usize,
    pub eval_targets_test: usize,
    pub sequence: SequenceGenConfig,

    pub preset: Preset,
    pub temperature: f64,

    pub epochs: usize,
    pub learning_rate: f64,
    pub minibatch: usize,
    pub retrain_with_validation: bool,

    pub iou_threshold: f64,
    pub recall_levels: Vec<f64>,
    pub sweep_thresholds: Vec<f64>,
    pub dtw_sigma: f64,
    pub dtw_scan_step: usize,
    pub single_thread: bool,
}

impl RunConfig {
    /// Track-appropriate defaults: 60/20/20 classes, the desk preset,
    /// temperature 1/3, learning rate 0.1, minibatch 64, IoU threshold 0.5,
    /// N-way sets {5, 10, 20} for images and {10, 20, 50} for sequences.
    pub fn default_for(track: Track) -> Self {
        RunConfig {
            track,
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
            classes_train: 60,
            classes_validation: 20,
            classes_test: 20,
            grid_n: 3,
            n_way: match track {
                Track::Image => vec![5, 10, 20],
                Track::Sequence => vec![10, 20, 50],
            },
            train_episodes: 512,
            eval_targets_validation: 16,
            eval_targets_test: 32,
            sequence: SequenceGenConfig::default(),
            preset: Preset::Desk,
            temperature: 1.0 / 3.0,
            epochs: 4,
            learning_rate: 0.1,
            minibatch: 64,
            retrain_with_validation: false,
            iou_threshold: 0.5,
            recall_levels: vec![0.5, 0.9, 0.99],
            sweep_thresholds: vec![0.2, 0.3, 0.4, 0.5],
            dtw_sigma: 50.0,
            dtw_scan_step: 1,
            single_thread: false,
        }
    }

    /// Parses the `key = value` format; `#` starts a comment. Unknown keys
    /// are errors so typos cannot silently fall back to defaults.
    pub fn parse(text: &str) -> Result<Self> {
        // The track decides the defaults, so find it first.
        let mut track = Track::Image;
        for (_, key, value) in entries(text)? {
            if key == "track" {
                track = parse_track(&value)?;
            }
        }
        let mut cfg = RunConfig::default_for(track);
        let mut n_way_set = false;
        for (line_no, key, value) in entries(text)? {
            let fail = |what: &str| {
                Error::invalid(format!("line {line_no}: bad value for {key}: {what}"))
            };
            match key.as_str() {
                "track" => {}
                "seed" => cfg.seed = value.parse().map_err(|_| fail("expected u64"))?,
                "out" => cfg.out_dir = PathBuf::from(&value),
                "classes_train" => cfg.classes_train = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "classes_validation" => cfg.classes_validation = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "classes_test" => cfg.classes_test = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "grid_n" => cfg.grid_n = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "n_way" => {
                    cfg.n_way = parse_list(&value).map_err(|_| fail("expected list of usize"))?;
                    n_way_set = true;
                }
                "train_episodes" => cfg.train_episodes = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "eval_targets_validation" => cfg.eval_targets_validation = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "eval_targets_test" => cfg.eval_targets_test = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "seq_channels" => cfg.sequence.channels = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "seq_target_frames" => cfg.sequence.target_frames = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "seq_template_min" => cfg.sequence.template_frames.0 = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "seq_template_max" => cfg.sequence.template_frames.1 = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "seq_warp_min" => cfg.sequence.warp_range.0 = parse_f64(&value).map_err(|_| fail("expected float"))?,
                "seq_warp_max" => cfg.sequence.warp_range.1 = parse_f64(&value).map_err(|_| fail("expected float"))?,
                "seq_insert_noise_std" => cfg.sequence.insert_noise_std = parse_f64(&value).map_err(|_| fail("expected float"))?,
                "seq_amp_min" => cfg.sequence.amp_range.0 = parse_f64(&value).map_err(|_| fail("expected float"))?,
                "seq_amp_max" => cfg.sequence.amp_range.1 = parse_f64(&value).map_err(|_| fail("expected float"))?,
                "seq_channel_gain_min" => cfg.sequence.channel_gain_range.0 = parse_f64(&value).map_err(|_| fail("expected float"))?,
                "seq_channel_gain_max" => cfg.sequence.channel_gain_range.1 = parse_f64(&value).map_err(|_| fail("expected float"))?,
                "seq_distractors" => cfg.sequence.distractors = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "preset" => cfg.preset = value.parse()?,
                "temperature" => cfg.temperature = parse_f64(&value).map_err(|_| fail("expected float"))?,
                "epochs" => cfg.epochs = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "learning_rate" => cfg.learning_rate = parse_f64(&value).map_err(|_| fail("expected float"))?,
                "minibatch" => cfg.minibatch = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "retrain_with_validation" => cfg.retrain_with_validation = parse_bool(&value).map_err(|_| fail("expected bool"))?,
                "iou_threshold" => cfg.iou_threshold = parse_f64(&value).map_err(|_| fail("expected float"))?,
                "recall_levels" => cfg.recall_levels = parse_f64_list(&value).map_err(|_| fail("expected list of float"))?,
                "sweep_thresholds" => cfg.sweep_thresholds = parse_f64_list(&value).map_err(|_| fail("expected list of float"))?,
                "dtw_sigma" => cfg.dtw_sigma = parse_f64(&value).map_err(|_| fail("expected float"))?,
                "dtw_scan_step" => cfg.dtw_scan_step = parse_usize(&value).map_err(|_| fail("expected usize"))?,
                "single_thread" => cfg.single_thread = parse_bool(&value).map_err(|_| fail("expected bool"))?,
                other => {
                    return Err(Error::invalid(format!("line {line_no}: unknown key {other:?}")))
                }
            }
        }
        if !n_way_set {
            cfg.n_way = RunConfig::default_for(cfg.track).n_way;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_train == 0 || self.classes_validation == 0 || self.classes_test == 0 {
            return Err(Error::invalid("every split needs at least one class".to_string()));
        }
        if !(2..=4).contains(&self.grid_n) {
            return Err(Error::invalid(format!("grid_n must be 2, 3 or 4, got {}", self.grid_n)));
        }
        if self.n_way.is_empty() {
            return Err(Error::invalid("need at least one n_way set".to_string()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive".to_string()));
        }
        if !(self.learning_rate > 0.0) || self.minibatch == 0 {
            return Err(Error::invalid("learning rate and minibatch must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::invalid("iou_threshold must lie in [0, 1]".to_string()));
        }
        self.sequence.validate()?;
        Ok(())
    }

    /// The embedding configuration this run instantiates.
    pub fn embed_config(&self) -> EmbedConfig {
        let in_channels = match self.track {
            Track::Image => 1,
            Track::Sequence => self.sequence.channels,
        };
        let rank = match self.track {
            Track::Image => 2,
            Track::Sequence => 1,
        };
        let mut cfg = match self.preset {
            Preset::Desk => EmbedConfig::desk(rank, in_channels),
            Preset::Paper => EmbedConfig::paper(rank, in_channels),
        };
        cfg.temperature = self.temperature;
        cfg
    }

    /// Canonical text form; `parse` of the result reproduces the config.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let flist = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "track = {}\nseed = {}\nout = {}\n\
             classes_train = {}\nclasses_validation = {}\nclasses_test = {}\n\
             grid_n = {}\nn_way = {}\ntrain_episodes = {}\n\
             eval_targets_validation = {}\neval_targets_test = {}\n\
             seq_channels = {}\nseq_target_frames = {}\n\
             seq_template_min = {}\nseq_template_max = {}\n\
             seq_warp_min = {}\nseq_warp_max = {}\nseq_insert_noise_std = {}\n\
             seq_amp_min = {}\nseq_amp_max = {}\n\
             seq_channel_gain_min = {}\nseq_channel_gain_max = {}\nseq_distractors = {}\n\
             preset = {}\ntemperature = {}\n\
             epochs = {}\nlearning_rate = {}\nminibatch = {}\nretrain_with_validation = {}\n\
             iou_threshold = {}\nrecall_levels = {}\nsweep_thresholds = {}\n\
             dtw_sigma = {}\ndtw_scan_step = {}\nsingle_thread = {}\n",
            self.track,
            self.seed,
            self.out_dir.display(),
            self.classes_train,
            self.classes_validation,
            self.classes_test,
            self.grid_n,
            list(&self.n_way),
            self.train_episodes,
            self.eval_targets_validation,
            self.eval_targets_test,
            self.sequence.channels,
            self.sequence.target_frames,
            self.sequence.template_frames.0,
            self.sequence.template_frames.1,
            self.sequence.warp_range.0,
            self.sequence.warp_range.1,
            self.sequence.insert_noise_std,
            self.sequence.amp_range.0,
            self.sequence.amp_range.1,
            self.sequence.channel_gain_range.0,
            self.sequence.channel_gain_range.1,
            self.sequence.distractors,
            match self.preset {
                Preset::Desk => "desk",
                Preset::Paper => "paper",
            },
            self.temperature,
            self.epochs,
            self.learning_rate,
            self.minibatch,
            self.retrain_with_validation,
            self.iou_threshold,
            flist(&self.recall_levels),
            flist(&self.sweep_thresholds),
            self.dtw_sigma,
            self.dtw_scan_step,
            self.single_thread,
        )
    }
}

fn parse_track(s: &str) -> Result<Track> {
    match s {
        "image" => Ok(Track::Image),
        "sequence" => Ok(Track::Sequence),
        other => Err(Error::invalid(format!("unknown track {other:?} (image | sequence)"))),
    }
}

fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::invalid(format!(
                "line {}: expected `key = value`, got {raw:?}",
                i + 1
            )));
        };
        out.push((i + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse_usize(s: &str) -> std::result::Result<usize, ()> {
    s.parse().map_err(|_| ())
}

fn parse_f64(s: &str) -> std::result::Result<f64, ()> {
    s.parse().map_err(|_| ())
}

fn parse_bool(s: &str) -> std::result::Result<bool, ()> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(()),
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, ()> {
    s.split(',').map(|p| p.trim().parse().map_err(|_| ())).collect()
}

fn parse_f64_list(s: &str) -> std::result::Result<Vec<f64>, ()> {
    s.split(',').map(|p| p.trim().parse().map_err(|_| ())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_applies_values_and_track_defaults() {
        let cfg = RunConfig::parse(
            "track = sequence\nseed = 7\nepochs = 2\nseq_insert_noise_std = 0.2\n# comment\n",
        )
        .unwrap();
        assert_eq!(cfg.track, Track::Sequence);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.n_way, vec![10, 20, 50]);
        assert_eq!(cfg.sequence.insert_noise_std, 0.2);
        // Spec defaults hold where unset.
        assert_eq!(cfg.learning_rate, 0.1);
        assert_eq!(cfg.minibatch, 64);
        assert_eq!(cfg.iou_threshold, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("learning_rte = 0.1\n").is_err());
    }

    #[test]
    fn malformed_lines_are_rejected_with_the_line_number() {
        let err = RunConfig::parse("seed 7\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn text_roundtrip_is_stable() {
        let mut cfg = RunConfig::default_for(Track::Image);
        cfg.seed = 99;
        cfg.n_way = vec![5];
        cfg.grid_n = 2;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.seed, 99);
        assert_eq!(back.n_way, vec![5]);
        assert_eq!(back.grid_n, 2);
        assert_eq!(back.to_text(), text);
    }
}
