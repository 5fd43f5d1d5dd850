//! Orchestration behind the CLI: dataset synthesis, training with
//! validation-based model selection, evaluation with calibration, AP-vs-IoU
//! sweeps, and the gradient-check suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{
    build_nway_eval, build_training_pairs, ClassCatalog, Episode, SplitSpec, StoredDataset,
    SynthDataset, Track, TrackConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    ap_iou_sweep, average_precision, calibrate_postprocess, emit_detections, precision_at_recall,
    pr_curve, score_episodes, Detection, EvalReport, PostprocessParams, ScoredEpisode, Scorer,
};
use crate::gradcheck::finite_diff_gradcheck;
use crate::net::{EmbedConfig, LayerSpec, ModelState};
use crate::optim::SgdConfig;
use crate::rng::{derive_seed, rng_from};
use crate::scorers::{DtwScorer, ExemplarScorer, RandomScorer, SimnetScorer};
use crate::scoring::{
    attention_weights_of, autograd_loss_score_gradient, loss_score_gradient, pooled_score_of,
};
use crate::tensor::Tensor;
use crate::train::train_epoch;
use crate::baseline::DtwConfig;

/// Which scorer `eval` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Simnet,
    Dtw,
    Exemplar,
    Random,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simnet" => Ok(ModelKind::Simnet),
            "dtw" => Ok(ModelKind::Dtw),
            "exemplar" => Ok(ModelKind::Exemplar),
            "random" => Ok(ModelKind::Random),
            other => Err(Error::invalid(format!(
                "unknown model {other:?} (simnet | dtw | exemplar | random)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Simnet => "simnet",
            ModelKind::Dtw => "dtw",
            ModelKind::Exemplar => "exemplar",
            ModelKind::Random => "random",
        };
        write!(f, "{s}")
    }
}

fn track_config(cfg: &RunConfig) -> TrackConfig {
    match cfg.track {
        Track::Image => TrackConfig::Image { grid_n: cfg.grid_n },
        Track::Sequence => TrackConfig::Sequence(cfg.sequence.clone()),
    }
}

/// Synthesises the dataset described by the config under
/// `{out}/dataset`: class-disjoint splits, balanced training pairs, and one
/// validation plus one test N-way set per configured N.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let catalog = ClassCatalog::new(cfg.seed);
    let splits =
        SplitSpec::from_counts(cfg.classes_train, cfg.classes_validation, cfg.classes_test);
    let track = track_config(cfg);

    let train = build_training_pairs(
        &catalog,
        &splits,
        cfg.train_episodes,
        &track,
        derive_seed(cfg.seed, "train-pairs", 0),
        0,
    )?;
    let mut next_id = train.len() as u64;
    let mut eval_sets = Vec::new();
    for &n in &cfg.n_way {
        for (split_name, pool, targets) in [
            ("validation", &splits.validation, cfg.eval_targets_validation),
            ("test", &splits.test, cfg.eval_targets_test),
        ] {
            let episodes = build_nway_eval(
                &catalog,
                pool,
                n,
                targets,
                &track,
                derive_seed(cfg.seed, "nway", (n * 2 + (split_name == "test") as usize) as u64),
                next_id,
            )?;
            next_id += episodes.len() as u64;
            eval_sets.push((format!("{split_name}_{n}way"), split_name.to_string(), n, episodes));
        }
    }

    let dataset = SynthDataset { seed: cfg.seed, track_config: track, splits, train, eval_sets };
    let dir = cfg.out_dir.join("dataset");
    dataset.save(&dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

/// Artifacts of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint_best: PathBuf,
    pub checkpoint_last: PathBuf,
    pub loss_csv: PathBuf,
    pub val_csv: PathBuf,
    pub best_epoch: usize,
    pub best_val_ap: f64,
}

fn save_model(path: &Path, state: &ModelState, next_epoch: usize) -> Result<()> {
    let mut entries = state.to_named_tensors();
    entries.push(("meta.next_epoch".to_string(), Tensor::scalar(next_epoch as f64)));
    checkpoint::save_file(path, &entries)
}

/// Loads a model checkpoint written by [`cmd_train`]; returns the state and
/// the next epoch index to run.
pub fn load_model(path: &Path, config: &EmbedConfig) -> Result<(ModelState, usize)> {
    let entries = checkpoint::load_file(path)?;
    let next_epoch = entries
        .iter()
        .find(|(n, _)| n == "meta.next_epoch")
        .map(|(_, t)| t.item() as usize)
        .unwrap_or(0);
    let state = ModelState::from_named_tensors(config, &entries)?;
    Ok((state, next_epoch))
}

/// Scores a validation set with the current model and returns its AP with an
/// all-pass emission gate (threshold 0, no shifts). Used for model selection
/// between epochs.
fn validation_ap(
    scorer: &SimnetScorer,
    episodes: &[Episode],
    iou_threshold: f64,
    parallel: bool,
) -> Result<f64> {
    let scored = score_episodes(scorer, episodes, parallel)?;
    let truths = crate::eval::truths_of(&scored);
    let detections = emit_detections(&scored, &PostprocessParams::default());
    Ok(average_precision(&detections, &truths, iou_threshold))
}

/// Trains the similarity network on a synthesised dataset, tracking
/// validation AP after every epoch and keeping the best-validation
/// checkpoint. `resume` continues from a previous `checkpoint_last`.
pub fn cmd_train(
    cfg: &RunConfig,
    dataset_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutputs> {
    cfg.validate()?;
    let dataset = StoredDataset::open(dataset_dir)?;
    if dataset.manifest.track != cfg.track {
        return Err(Error::invalid(format!(
            "config says track {} but the dataset is {}",
            cfg.track, dataset.manifest.track
        )));
    }

    let embed_cfg = cfg.embed_config();
    let mut train_episodes: Vec<Episode> =
        dataset.load_episodes(&dataset.manifest.train_episodes)?;
    if cfg.retrain_with_validation {
        // Rebuild training pairs over train + validation classes; model
        // selection is disabled and the last epoch wins.
        let catalog = ClassCatalog::new(dataset.manifest.seed);
        let mut merged = dataset.manifest.splits.clone();
        merged.train.extend(merged.validation.iter().copied());
        merged.validation.clear();
        train_episodes = build_training_pairs(
            &catalog,
            &merged,
            cfg.train_episodes,
            &dataset.manifest.track_config,
            derive_seed(dataset.manifest.seed, "retrain-pairs", 0),
            0,
        )?;
    }

    let val_set_name = format!("validation_{}way", cfg.n_way[0]);
    let val_episodes: Option<Vec<Episode>> = if cfg.retrain_with_validation {
        None
    } else {
        let set = dataset.eval_set(&val_set_name).ok_or_else(|| {
            Error::invalid(format!("dataset has no evaluation set {val_set_name:?}"))
        })?;
        Some(dataset.load_episodes(&set.episodes.clone())?)
    };

    let (mut state, start_epoch) = match resume {
        Some(path) => load_model(path, &embed_cfg)?,
        None => (ModelState::init(&embed_cfg, derive_seed(cfg.seed, "model-init", 0))?, 0),
    };
    let sgd = SgdConfig::new(cfg.learning_rate, cfg.minibatch)?;

    fs::create_dir_all(&cfg.out_dir)?;
    let loss_csv = cfg.out_dir.join("loss.csv");
    let val_csv = cfg.out_dir.join("val_ap.csv");
    let checkpoint_best = cfg.out_dir.join("checkpoint_best.bin");
    let checkpoint_last = cfg.out_dir.join("checkpoint_last.bin");

    let mut loss_rows = String::from("epoch,batch,loss\n");
    let mut val_rows = String::from("epoch,ap\n");
    let mut best_val_ap = f64::NEG_INFINITY;
    let mut best_epoch = start_epoch;

    for epoch in start_epoch..cfg.epochs.max(start_epoch) {
        let records = train_epoch(
            &train_episodes,
            &embed_cfg,
            &mut state,
            &sgd,
            epoch,
            derive_seed(cfg.seed, "train-epoch", epoch as u64),
        )?;
        for r in &records {
            writeln!(loss_rows, "{},{},{}", r.epoch, r.batch, r.loss).expect("string write");
        }

        save_model(&checkpoint_last, &state, epoch + 1)?;
        match &val_episodes {
            Some(eps) => {
                let scorer = SimnetScorer {
                    config: embed_cfg.clone(),
                    state: ModelState::from_named_tensors(&embed_cfg, &state.to_named_tensors())?,
                };
                let ap = validation_ap(&scorer, eps, cfg.iou_threshold, !cfg.single_thread)?;
                writeln!(val_rows, "{epoch},{ap}").expect("string write");
                if ap > best_val_ap {
                    best_val_ap = ap;
                    best_epoch = epoch;
                    save_model(&checkpoint_best, &state, epoch + 1)?;
                }
            }
            None => {
                best_epoch = epoch;
                save_model(&checkpoint_best, &state, epoch + 1)?;
            }
        }
    }
    if best_val_ap == f64::NEG_INFINITY {
        best_val_ap = 0.0;
    }

    fs::write(&loss_csv, loss_rows)?;
    fs::write(&val_csv, val_rows)?;
    let summary = serde_json::json!({
        "best_epoch": best_epoch,
        "best_val_ap": best_val_ap,
        "epochs_run": cfg.epochs.max(start_epoch) - start_epoch,
    });
    fs::write(cfg.out_dir.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;

    Ok(TrainOutputs { checkpoint_best, checkpoint_last, loss_csv, val_csv, best_epoch, best_val_ap })
}

fn detections_csv(detections: &[Detection]) -> String {
    let axes = detections.first().map(|d| d.bbox.axes()).unwrap_or(1);
    let mut header = String::from("episode_id,confidence");
    for a in 0..axes {
        write!(header, ",offset_{a},extent_{a}").expect("string write");
    }
    header.push('\n');
    let mut out = header;
    for d in detections {
        write!(out, "{},{}", d.episode_id, d.confidence).expect("string write");
        for a in 0..d.bbox.axes() {
            write!(out, ",{},{}", d.bbox.offset[a], d.bbox.extent[a]).expect("string write");
        }
        out.push('\n');
    }
    out
}

fn ground_truth_csv(scored: &[ScoredEpisode]) -> String {
    let axes = scored.first().map(|s| s.target_extent.len()).unwrap_or(1);
    let mut out = String::from("episode_id,label");
    for a in 0..axes {
        write!(out, ",offset_{a},extent_{a}").expect("string write");
    }
    out.push('\n');
    for s in scored {
        write!(out, "{},{}", s.episode_id, s.label).expect("string write");
        match &s.truth {
            Some(b) => {
                for a in 0..b.axes() {
                    write!(out, ",{},{}", b.offset[a], b.extent[a]).expect("string write");
                }
            }
            None => {
                for _ in 0..axes {
                    out.push_str(",,");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Builds the scorer for a model kind over a stored dataset.
pub fn build_scorer(
    cfg: &RunConfig,
    model: ModelKind,
    dataset: &StoredDataset,
    checkpoint_path: Option<&Path>,
) -> Result<Box<dyn Scorer>> {
    let embed_cfg = cfg.embed_config();
    match model {
        ModelKind::Simnet => {
            let path = checkpoint_path.ok_or_else(|| {
                Error::invalid("model simnet needs a checkpoint (--checkpoint)".to_string())
            })?;
            let (state, _) = load_model(path, &embed_cfg)?;
            Ok(Box::new(SimnetScorer::new(embed_cfg, state)))
        }
        ModelKind::Dtw => {
            if dataset.manifest.track != Track::Sequence {
                return Err(Error::invalid(
                    "the DTW baseline runs on the sequence track only".to_string(),
                ));
            }
            Ok(Box::new(DtwScorer {
                config: DtwConfig {
                    sigma: cfg.dtw_sigma,
                    scan_step: cfg.dtw_scan_step,
                    ..DtwConfig::default()
                },
            }))
        }
        ModelKind::Exemplar => {
            if dataset.manifest.track != Track::Image {
                return Err(Error::invalid(
                    "the exemplar-classifier baseline runs on the image track only".to_string(),
                ));
            }
            let catalog = ClassCatalog::new(dataset.manifest.seed);
            Ok(Box::new(ExemplarScorer::from_training_split(
                &catalog,
                &dataset.manifest.splits.train,
                Default::default(),
                Default::default(),
            )?))
        }
        ModelKind::Random => Ok(Box::new(RandomScorer {
            seed: derive_seed(cfg.seed, "random-model", 0),
            config: embed_cfg,
        })),
    }
}

/// Evaluates one scorer on one N-way pair of sets (calibrate on validation,
/// report on test).
pub fn evaluate_set(
    cfg: &RunConfig,
    scorer: &dyn Scorer,
    dataset: &StoredDataset,
    n_way: usize,
) -> Result<(EvalReport, Vec<Detection>, Vec<ScoredEpisode>)> {
    let parallel = !cfg.single_thread;
    let one_d = dataset.manifest.track == Track::Sequence;

    let val_name = format!("validation_{n_way}way");
    let test_name = format!("test_{n_way}way");
    let val_set = dataset
        .eval_set(&val_name)
        .ok_or_else(|| Error::invalid(format!("dataset has no set {val_name:?}")))?
        .clone();
    let test_set = dataset
        .eval_set(&test_name)
        .ok_or_else(|| Error::invalid(format!("dataset has no set {test_name:?}")))?
        .clone();

    let val_scored = score_episodes(scorer, &dataset.load_episodes(&val_set.episodes)?, parallel)?;
    let params = calibrate_postprocess(&val_scored, one_d, cfg.iou_threshold);

    let test_scored =
        score_episodes(scorer, &dataset.load_episodes(&test_set.episodes)?, parallel)?;
    let truths = crate::eval::truths_of(&test_scored);
    let detections = emit_detections(&test_scored, &params);
    let ap = average_precision(&detections, &truths, cfg.iou_threshold);
    let curve = pr_curve(&detections, &truths, cfg.iou_threshold);

    let pair_scores: Vec<(u64, f64, u8)> =
        test_scored.iter().map(|s| (s.episode_id, s.confidence, s.label)).collect();
    let precisions = precision_at_recall(&pair_scores, &cfg.recall_levels);
    let precision_at_recall = cfg
        .recall_levels
        .iter()
        .zip(&precisions)
        .map(|(l, p)| (format!("{l}"), *p))
        .collect();

    let report = EvalReport {
        set: test_name,
        n_way,
        iou_threshold: cfg.iou_threshold,
        ap,
        precision_at_recall,
        calibration: params,
        num_episodes: test_scored.len(),
        num_positives: truths.iter().filter(|t| t.label == 1).count(),
        pr_curve: curve,
    };
    Ok((report, detections, test_scored))
}

/// Calibrates on each validation set and writes a report JSON, a detection
/// CSV and a ground-truth CSV per configured N-way test set.
pub fn cmd_eval(
    cfg: &RunConfig,
    model: ModelKind,
    dataset_dir: &Path,
    checkpoint_path: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dataset = StoredDataset::open(dataset_dir)?;
    let scorer = build_scorer(cfg, model, &dataset, checkpoint_path)?;

    let report_dir = cfg.out_dir.join("reports").join(model.to_string());
    fs::create_dir_all(&report_dir)?;
    let mut written = Vec::new();
    for &n in &cfg.n_way {
        let (report, detections, test_scored) = evaluate_set(cfg, scorer.as_ref(), &dataset, n)?;
        let report_path = report_dir.join(format!("report_test_{n}way.json"));
        fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
        fs::write(
            report_dir.join(format!("detections_test_{n}way.csv")),
            detections_csv(&detections),
        )?;
        fs::write(
            report_dir.join(format!("ground_truth_test_{n}way.csv")),
            ground_truth_csv(&test_scored),
        )?;
        written.push(report_path);
    }
    Ok(written)
}

/// Re-evaluates a trained network's test detections under each IoU threshold
/// and writes one `iou_threshold,ap` CSV per N-way set.
pub fn cmd_sweep(cfg: &RunConfig, checkpoint_path: &Path, dataset_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dataset = StoredDataset::open(dataset_dir)?;
    let scorer = build_scorer(cfg, ModelKind::Simnet, &dataset, Some(checkpoint_path))?;

    let mut thresholds = cfg.sweep_thresholds.clone();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let dir = cfg.out_dir.join("sweep");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for &n in &cfg.n_way {
        let (_, detections, test_scored) = evaluate_set(cfg, scorer.as_ref(), &dataset, n)?;
        let truths = crate::eval::truths_of(&test_scored);
        let rows = ap_iou_sweep(&detections, &truths, &thresholds);
        let mut csv = String::from("iou_threshold,ap\n");
        for (t, ap) in rows {
            writeln!(csv, "{t},{ap}").expect("string write");
        }
        let path = dir.join(format!("sweep_test_{n}way.csv"));
        fs::write(&path, csv)?;
        written.push(path);
    }
    Ok(written)
}

/// One line of the gradient-check suite.
#[derive(Clone, Debug)]
pub struct GradcheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Summary of the whole suite.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<GradcheckLine>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            writeln!(
                out,
                "{} {:<44} max rel err {:>12.3e}  tolerance {:>8.1e}",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_err,
                c.tolerance
            )
            .expect("string write");
        }
        out
    }
}

/// Maximum relative error between a closed-form score-gradient oracle and the
/// tape over `draws` random instances. Exposed so a deliberately broken
/// oracle can be checked to fail.
pub fn score_gradient_oracle_max_err(
    oracle: &dyn Fn(&[f64], f64, f64) -> Vec<f64>,
    seed: u64,
    draws: usize,
) -> Result<f64> {
    use rand::Rng;
    let mut rng = rng_from(seed);
    let mut max_err: f64 = 0.0;
    for case in 0..draws {
        let n = rng.gen_range(5..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let t = [1.0 / 3.0, 1.0, 3.0][case % 3];
        let y = (case % 2) as f64;
        let reference = oracle(&scores, y, t);
        let auto = autograd_loss_score_gradient(&scores, y, t)?;
        for (a, b) in auto.iter().zip(&reference) {
            let err = (a - b).abs() / b.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Runs the full gradient-check suite: per-operation finite differences, the
/// closed-form score gradient against the tape, the gradient-sum rule, and a
/// finite-difference check of the whole pair loss through a small network.
pub fn cmd_gradcheck(seed: u64) -> Result<GradcheckReport> {
    use rand::Rng;
    let mut checks = Vec::new();
    let mut push = |name: &str, err: f64, tol: f64, checks: &mut Vec<GradcheckLine>| {
        checks.push(GradcheckLine {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: tol,
            pass: err < tol,
        });
    };

    let mut rng = rng_from(derive_seed(seed, "gradcheck", 0));
    let mut rand_tensor = |shape: &[usize], lo: f64, hi: f64| {
        let numel = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..numel).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect::<Vec<f64>>(),
        )
        .expect("well-formed shape")
    };

    // Elementwise chain: sum of squares.
    let point = rand_tensor(&[12], -2.0, 2.0);
    let err = finite_diff_gradcheck(
        |t, x| {
            let sq = t.square(x);
            Ok(t.sum(sq))
        },
        &point,
        1e-5,
    )?;
    push("sum of squares", err, 1e-9, &mut checks);

    // Convolution, both spatial ranks, gradient w.r.t. input and kernel.
    let kernel1 = rand_tensor(&[3, 2, 3], -1.0, 1.0);
    let input1 = rand_tensor(&[1, 2, 9], -1.0, 1.0);
    let err = finite_diff_gradcheck(
        |t, x| {
            let k = t.constant(kernel1.clone());
            let c = t.conv(x, k, &[1])?;
            Ok(t.sum(c))
        },
        &input1,
        1e-5,
    )?;
    push("conv1d w.r.t. input", err, 1e-6, &mut checks);
    let err = finite_diff_gradcheck(
        |t, x| {
            let i = t.constant(input1.clone());
            let c = t.conv(i, x, &[1])?;
            Ok(t.sum(c))
        },
        &kernel1,
        1e-5,
    )?;
    push("conv1d w.r.t. kernel", err, 1e-6, &mut checks);

    let kernel2 = rand_tensor(&[2, 2, 3, 3], -1.0, 1.0);
    let input2 = rand_tensor(&[1, 2, 7, 8], -1.0, 1.0);
    let err = finite_diff_gradcheck(
        |t, x| {
            let k = t.constant(kernel2.clone());
            let c = t.conv(x, k, &[1, 1])?;
            let sq = t.square(c);
            Ok(t.sum(sq))
        },
        &input2,
        1e-5,
    )?;
    push("conv2d w.r.t. input", err, 1e-6, &mut checks);
    let err = finite_diff_gradcheck(
        |t, x| {
            let i = t.constant(input2.clone());
            let c = t.conv(i, x, &[1, 1])?;
            let sq = t.square(c);
            Ok(t.sum(sq))
        },
        &kernel2,
        1e-5,
    )?;
    push("conv2d w.r.t. kernel", err, 1e-6, &mut checks);

    // Max pooling away from ties.
    let pool_in = {
        let mut t = rand_tensor(&[1, 2, 8, 8], 0.0, 1.0);
        for (i, v) in t.values_mut().iter_mut().enumerate() {
            *v += i as f64 * 1e-3;
        }
        t
    };
    let err = finite_diff_gradcheck(
        |t, x| {
            let p = t.maxpool(x)?;
            let sq = t.square(p);
            Ok(t.sum(sq))
        },
        &pool_in,
        1e-6,
    )?;
    push("maxpool", err, 1e-6, &mut checks);

    // Batch normalisation in training mode, w.r.t. input, gamma and beta.
    let bn_in = rand_tensor(&[3, 2, 5], -1.0, 1.0);
    let gamma = rand_tensor(&[2], 0.5, 1.5);
    let beta = rand_tensor(&[2], -0.5, 0.5);
    let weights = rand_tensor(&[30], -1.0, 1.0);
    let err = finite_diff_gradcheck(
        |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let mut moments = crate::tape::RunningMoments::new(2);
            let y = t.batchnorm(x, g, b, &mut moments, crate::tape::Mode::Train)?;
            let w = t.constant(weights.clone());
            let flat = t.reshape(y, vec![30])?;
            t.dot(flat, w)
        },
        &bn_in,
        1e-5,
    )?;
    push("batchnorm w.r.t. input", err, 1e-6, &mut checks);
    let err = finite_diff_gradcheck(
        |t, x| {
            let i = t.constant(bn_in.clone());
            let b = t.constant(beta.clone());
            let mut moments = crate::tape::RunningMoments::new(2);
            let y = t.batchnorm(i, x, b, &mut moments, crate::tape::Mode::Train)?;
            let w = t.constant(weights.clone());
            let flat = t.reshape(y, vec![30])?;
            t.dot(flat, w)
        },
        &gamma,
        1e-5,
    )?;
    push("batchnorm w.r.t. gamma", err, 1e-6, &mut checks);

    // ReLU away from the kink.
    let relu_in = {
        let mut t = rand_tensor(&[16], -1.0, 1.0);
        for v in t.values_mut() {
            if v.abs() < 0.1 {
                *v += 0.2_f64.copysign(*v);
            }
        }
        t
    };
    let err = finite_diff_gradcheck(
        |t, x| {
            let r = t.relu(x);
            let sq = t.square(r);
            Ok(t.sum(sq))
        },
        &relu_in,
        1e-5,
    )?;
    push("relu (away from 0)", err, 1e-8, &mut checks);

    // L2 normalisation followed by a fixed projection.
    let l2_in = rand_tensor(&[10], -1.0, 1.0);
    let proj = rand_tensor(&[10], -1.0, 1.0);
    let err = finite_diff_gradcheck(
        |t, x| {
            let n = t.l2_normalize(x);
            let w = t.constant(proj.clone());
            t.dot(n, w)
        },
        &l2_in,
        1e-5,
    )?;
    push("l2 normalise", err, 1e-8, &mut checks);

    // Temperature softmax composed with a projection.
    let sm_in = rand_tensor(&[9], 0.0, 1.0);
    let sm_proj = rand_tensor(&[9], -1.0, 2.0);
    let err = finite_diff_gradcheck(
        |t, x| {
            let w = t.softmax_temp(x, 1.0 / 3.0)?;
            let c = t.constant(sm_proj.clone());
            t.dot(w, c)
        },
        &sm_in,
        1e-5,
    )?;
    push("softmax then projection", err, 1e-6, &mut checks);

    // Cosine similarity map w.r.t. both embeddings.
    let ex = rand_tensor(&[3, 2, 2], 0.0, 1.0);
    let tg = rand_tensor(&[3, 5, 4], 0.0, 1.0);
    let err = finite_diff_gradcheck(
        |t, x| {
            let target = t.constant(tg.clone());
            let m = t.cosine_similarity_map(x, target)?;
            let sq = t.square(m);
            Ok(t.sum(sq))
        },
        &ex,
        1e-5,
    )?;
    push("similarity map w.r.t. exemplar", err, 1e-6, &mut checks);
    let err = finite_diff_gradcheck(
        |t, x| {
            let e = t.constant(ex.clone());
            let m = t.cosine_similarity_map(e, x)?;
            let sq = t.square(m);
            Ok(t.sum(sq))
        },
        &tg,
        1e-5,
    )?;
    push("similarity map w.r.t. target", err, 1e-6, &mut checks);

    // The closed-form score gradient against the tape, and both against
    // finite differences, over 100 random instances.
    let eq_err = score_gradient_oracle_max_err(
        &|s, y, t| loss_score_gradient(s, y, t),
        derive_seed(seed, "oracle", 1),
        100,
    )?;
    push("closed-form score gradient vs tape", eq_err, 1e-9, &mut checks);

    let mut fd_err: f64 = 0.0;
    let mut sum_err: f64 = 0.0;
    {
        let mut rng = rng_from(derive_seed(seed, "oracle-fd", 2));
        for case in 0..25 {
            let n = rng.gen_range(5..=50);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let t = [1.0 / 3.0, 1.0, 3.0][case % 3];
            let y = (case % 2) as f64;
            let err = finite_diff_gradcheck(
                |tape, x| {
                    let w = tape.softmax_temp(x, t)?;
                    let y_hat = tape.dot(w, x)?;
                    crate::scoring::pair_loss(tape, y_hat, y)
                },
                &Tensor::from_vec(scores.clone()),
                1e-5,
            )?;
            fd_err = fd_err.max(err);

            let w = attention_weights_of(&scores, t);
            let y_hat = pooled_score_of(&scores, &w);
            let total: f64 = scores
                .iter()
                .zip(&w)
                .map(|(s, wl)| wl * (1.0 + (s - y_hat) / t))
                .sum();
            sum_err = sum_err.max((total - 1.0).abs());
        }
    }
    push("attention loss vs finite differences", fd_err, 1e-4, &mut checks);
    push("gradient-sum rule", sum_err, 1e-9, &mut checks);

    // The full pair loss through a small end-to-end network, checked by
    // finite differences on a parameter kernel.
    let micro = EmbedConfig {
        spatial_rank: 2,
        in_channels: 1,
        layers: vec![
            LayerSpec { channels: 3, kernel: 3, stride: 1, pool_after: true },
            LayerSpec { channels: 4, kernel: 3, stride: 1, pool_after: false },
        ],
        temperature: 1.0 / 3.0,
    };
    let state = ModelState::init(&micro, derive_seed(seed, "gradcheck-net", 3))?;
    let exemplar = rand_tensor(&[1, 12, 12], 0.0, 1.0);
    let target = rand_tensor(&[1, 20, 20], 0.0, 1.0);
    let kernel_name = "layer1.kernel";
    let point = state.params.value(state.params.id(kernel_name).expect("exists")).clone();
    let err = finite_diff_gradcheck(
        |tape, x| {
            let mut moments = vec![
                crate::tape::RunningMoments::new(3),
                crate::tape::RunningMoments::new(4),
            ];
            // Re-run the embedding stack with layer1's kernel replaced by x.
            let forward = |tape: &mut crate::tape::Tape,
                           input: &Tensor,
                           x: crate::tape::Var,
                           moments: &mut [crate::tape::RunningMoments]|
             -> Result<crate::tape::Var> {
                let mut shape = vec![1];
                shape.extend_from_slice(input.shape());
                let mut cur = tape.leaf(input.reshaped(shape)?, false);
                for (i, layer) in micro.layers.iter().enumerate() {
                    let k = if i == 1 {
                        x
                    } else {
                        let id = state.params.id(&format!("layer{i}.kernel")).expect("exists");
                        tape.constant(state.params.value(id).clone())
                    };
                    let g = {
                        let id = state.params.id(&format!("layer{i}.gamma")).expect("exists");
                        tape.constant(state.params.value(id).clone())
                    };
                    let b = {
                        let id = state.params.id(&format!("layer{i}.beta")).expect("exists");
                        tape.constant(state.params.value(id).clone())
                    };
                    cur = tape.conv(cur, k, &[1, 1])?;
                    cur = tape.batchnorm(cur, g, b, &mut moments[i], crate::tape::Mode::Train)?;
                    cur = tape.relu(cur);
                    if layer.pool_after {
                        cur = tape.maxpool(cur)?;
                    }
                }
                let out_shape = tape.value(cur).shape()[1..].to_vec();
                tape.reshape(cur, out_shape)
            };
            let ex_emb = forward(tape, &exemplar, x, &mut moments)?;
            let tg_emb = forward(tape, &target, x, &mut moments)?;
            let map = tape.cosine_similarity_map(ex_emb, tg_emb)?;
            let w = crate::scoring::attention_weights(tape, map, micro.temperature)?;
            let n = tape.value(map).numel();
            let flat = tape.reshape(map, vec![n])?;
            let score = tape.dot(w, flat)?;
            crate::scoring::pair_loss(tape, score, 1.0)
        },
        &point,
        1e-5,
    )?;
    push("full pair loss vs finite differences", err, 1e-4, &mut checks);

    Ok(GradcheckReport { checks })
}
