//! The pipeline stages behind each subcommand.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use choreo_core::data::{Clip, DanceDataset, FeatureLayout, MusicFeatureSequence, PoseSequence, Split};
use choreo_core::metrics::{self, beat_coverage_hit, kinematic_beats, musical_beats, MetricsReport};
use choreo_core::model::Model;
use choreo_core::synth::synth_corpus;
use choreo_core::training::{EpochRecord, Trainer};
use choreo_core::Tensor;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{load_dataset, read_clip, read_json, save_dataset, write_clip, write_json, DatasetManifest};

pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Generates the synthetic corpus and writes it to `out_dir`.
pub fn synth_data(cfg: &RunConfig, out_dir: &Path) -> Result<DanceDataset> {
    let ds = synth_corpus(&cfg.data, &FeatureLayout::default())?;
    save_dataset(out_dir, &ds)?;
    write_json(&out_dir.join(CONFIG_FILE), cfg)?;
    Ok(ds)
}

pub fn corpus_summary(ds: &DanceDataset) -> String {
    let train = ds.split(Split::Train).count();
    let test = ds.clips.len() - train;
    let frames = ds.clips.first().map_or(0, |c| c.pose.len());
    format!(
        "{} clips ({train} train, {test} test), {} styles, {frames} frames at {} fps, feature width {}",
        ds.clips.len(),
        ds.num_styles(),
        ds.fps,
        ds.layout.width()
    )
}

fn log_row(r: &EpochRecord) -> String {
    format!("{},{},{},{},{}\n", r.epoch, r.p, r.loss, r.loss_per_elem, r.seconds)
}

const LOG_HEADER: &str = "epoch,p,loss,loss_per_elem,seconds\n";

/// Keeps the header and the rows of epochs before `epoch`.
fn truncated_log(path: &Path, epoch: usize) -> String {
    let mut out = String::from(LOG_HEADER);
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let e = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
            if e.is_some_and(|e| e < epoch) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

/// Trains on the dataset's training split. With `resume`, picks up from the
/// checkpoint in `out_dir` and runs until `cfg.train.epochs` epochs are done.
pub fn train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, resume: bool) -> Result<Trainer> {
    cfg.train.validate()?;
    let ds = load_dataset(data_dir)?;
    let train_clips: Vec<&Clip> = ds.split(Split::Train).collect();
    if train_clips.is_empty() {
        return Err(CliError::format(data_dir, "dataset has no training clips"));
    }
    let ck_dir = out_dir.join(CHECKPOINT_DIR);
    let mut trainer = if resume {
        let ck = checkpoint::load(&ck_dir)?;
        if ck.model.config != cfg.model() {
            return Err(CliError::Usage(
                "resume: encoder/decoder config differs from the checkpoint".into(),
            ));
        }
        let mut t = Trainer::new(ck.model, cfg.train.clone(), cfg.curriculum.clone())?;
        t.optimizer = ck.optimizer;
        t.epoch = ck.epoch;
        t.log = ck.log;
        t
    } else {
        let mut model = Model::init(cfg.model(), cfg.train.seed)?;
        model.fit_normalization(&train_clips)?;
        Trainer::new(model, cfg.train.clone(), cfg.curriculum.clone())?
    };
    let data = train_clips
        .iter()
        .map(|c| trainer.model.prepare(c))
        .collect::<choreo_core::Result<Vec<_>>>()?;

    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    write_json(&out_dir.join(CONFIG_FILE), cfg)?;
    let log_path = out_dir.join(TRAIN_LOG);
    let header = if resume {
        truncated_log(&log_path, trainer.epoch)
    } else {
        LOG_HEADER.to_string()
    };
    fs::write(&log_path, header).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;

    while trainer.epoch < cfg.train.epochs {
        let start = Instant::now();
        trainer.run_epoch(&data)?;
        let rec = trainer.log.last_mut().expect("epoch recorded");
        rec.seconds = start.elapsed().as_secs_f64();
        log.write_all(log_row(rec).as_bytes())
            .map_err(|e| CliError::io(&log_path, e))?;
        let every = cfg.train.checkpoint_every;
        if every > 0 && trainer.epoch % every == 0 && trainer.epoch < cfg.train.epochs {
            checkpoint::save(&ck_dir, &Checkpoint::from_trainer(&trainer, cfg))?;
        }
    }
    checkpoint::save(&ck_dir, &Checkpoint::from_trainer(&trainer, cfg))?;
    Ok(trainer)
}

/// Generates a dance for one music clip file and writes it as a pose clip.
pub fn generate(checkpoint_dir: &Path, music_file: &Path, seed: u64, out_file: &Path) -> Result<Tensor> {
    let ck = checkpoint::load(checkpoint_dir)?;
    let music = read_clip(music_file)?;
    let d_x = ck.model.config.encoder.d_x;
    if music.frames.cols() != d_x {
        return Err(CliError::format(
            music_file,
            format!("feature width {} does not match the model's {d_x}", music.frames.cols()),
        ));
    }
    let poses = ck.model.generate(&music.frames, seed)?;
    write_clip(out_file, &poses, music.fps, &[&format!("seed={seed}")])?;
    Ok(poses)
}

/// Output files written next to the report JSON.
pub fn report_paths(out_file: &Path) -> (PathBuf, PathBuf) {
    let stem = out_file.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let dir = out_file.parent().unwrap_or(Path::new(""));
    (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}_fid_over_time.csv")))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn report_csv(r: &MetricsReport) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "fid,{}", opt(r.fid));
    let _ = writeln!(s, "style_acc,{}", r.style_acc);
    let _ = writeln!(s, "beat_coverage,{}", r.beat_coverage);
    let _ = writeln!(s, "beat_hit_rate,{}", r.beat_hit_rate);
    let _ = writeln!(s, "diversity,{}", r.diversity);
    let _ = writeln!(s, "multimodality,{}", opt(r.multimodality));
    s
}

pub fn fid_over_time_csv(r: &MetricsReport) -> String {
    let mut s = String::from("window,fid\n");
    for (w, f) in &r.fid_over_time {
        let _ = writeln!(s, "{w},{f}");
    }
    s
}

/// Scores the checkpoint's dances for every clip of the dataset, or with
/// `checkpoint_dir = None`, the dataset's real poses against themselves.
/// Metric settings come from the checkpoint config unless `metrics_cfg`
/// is given.
pub fn evaluate(
    checkpoint_dir: Option<&Path>,
    data_dir: &Path,
    metrics_cfg: Option<&RunConfig>,
    seed: u64,
    out_file: &Path,
) -> Result<MetricsReport> {
    let ds = load_dataset(data_dir)?;
    for split in [Split::Train, Split::Test] {
        if ds.split(split).next().is_none() {
            return Err(CliError::format(
                data_dir,
                format!("dataset has no {} split", if split == Split::Train { "train" } else { "test" }),
            ));
        }
    }
    let (generated, cfg) = match checkpoint_dir {
        Some(dir) => {
            let ck = checkpoint::load(dir)?;
            let cfg = metrics_cfg.map_or_else(|| ck.config.metrics.clone(), |c| c.metrics.clone());
            (metrics::generate_for_eval(&ck.model, &ds, cfg.samples, seed)?, cfg)
        }
        None => {
            let cfg = metrics_cfg.map(|c| c.metrics.clone()).unwrap_or_default();
            (ds.clips.iter().map(|c| vec![c.pose.frames.clone()]).collect(), cfg)
        }
    };
    let report = metrics::evaluate(&ds, &generated, &cfg, seed)?;

    if let Some(dir) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_json(out_file, &report)?;
    let (csv, fot) = report_paths(out_file);
    fs::write(&csv, report_csv(&report)).map_err(|e| CliError::io(&csv, e))?;
    fs::write(&fot, fid_over_time_csv(&report)).map_err(|e| CliError::io(&fot, e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeatReport {
    pub kinematic: Vec<usize>,
    pub musical: Vec<usize>,
    pub aligned: usize,
    pub coverage: f64,
    pub hit_rate: f64,
}

/// Beat lists and coverage/hit rate for one music/pose pair. The feature
/// layout is read from `dataset_dir`'s manifest when given.
pub fn beats(cfg: &RunConfig, music_file: &Path, pose_file: &Path, dataset_dir: Option<&Path>) -> Result<BeatReport> {
    let layout = match dataset_dir {
        Some(d) => read_json::<DatasetManifest>(&d.join(crate::io::MANIFEST))?.layout,
        None => FeatureLayout::default(),
    };
    let music = read_clip(music_file)?;
    let pose = read_clip(pose_file)?;
    if music.frames.rows() != pose.frames.rows() {
        return Err(CliError::format(
            pose_file,
            format!("{} frames, music has {}", pose.frames.rows(), music.frames.rows()),
        ));
    }
    let fps = music.fps;
    let clip = Clip {
        music: MusicFeatureSequence::new(music.frames, layout, fps)?,
        pose: PoseSequence::new(pose.frames, pose.fps)?,
        style: 0,
        split: Split::Test,
    };
    let m = &cfg.metrics;
    let musical = musical_beats(&clip, m.onset_threshold);
    let kinematic = kinematic_beats(&clip.pose.frames, m.window, m.prominence)?;
    let s = beat_coverage_hit(&kinematic, &musical, m.dt * fps)?;
    Ok(BeatReport {
        kinematic,
        musical,
        aligned: s.aligned,
        coverage: s.coverage,
        hit_rate: s.hit_rate,
    })
}
