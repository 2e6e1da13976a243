//! Evaluation suite: FID, style accuracy, beat coverage and hit rate,
//! diversity, multimodality and FID over time.

pub mod beats;
pub mod classifier;
pub mod diversity;
pub mod fid;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use beats::{
    beat_alignment_ratio, beat_coverage_hit, kinematic_beats, match_beats, motion_sd, onehot_beats, onset_beats,
    BeatScores,
};
pub use classifier::{ClassifierConfig, StyleClassifier};
pub use diversity::{diversity, multimodality};
pub use fid::fid;

use crate::data::{Clip, DanceDataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Beat matching tolerance, seconds.
    pub dt: f64,
    /// Motion SD window, frames.
    pub window: usize,
    /// Minimum dip prominence as a fraction of the SD curve's range.
    pub prominence: f64,
    pub num_pairs: usize,
    /// FID-over-time window, seconds.
    pub fid_window: f64,
    /// Generated dances per music clip.
    pub samples: usize,
    /// Onset threshold, used when the layout has no beat channel.
    pub onset_threshold: f64,
    pub classifier: ClassifierConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 15.0,
            window: 5,
            prominence: 0.1,
            num_pairs: 500,
            fid_window: 4.0,
            samples: 5,
            onset_threshold: 0.5,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when either set has too few windows for the feature width.
    pub fid: Option<f64>,
    pub style_acc: f64,
    pub beat_coverage: f64,
    pub beat_hit_rate: f64,
    pub diversity: f64,
    /// `None` with fewer than two samples per clip.
    pub multimodality: Option<f64>,
    /// `(window index, fid)`; empty when a window has too few samples.
    pub fid_over_time: Vec<(usize, f64)>,
}

/// Musical beats of a clip: the beat channel when the layout has one,
/// otherwise onset peaks.
pub fn musical_beats(clip: &Clip, onset_threshold: f64) -> Vec<usize> {
    if let Some(c) = clip.music.channel("beat_onehot") {
        return onehot_beats(&c);
    }
    clip.music
        .channel("onset")
        .map(|c| onset_beats(&c, onset_threshold))
        .unwrap_or_default()
}

fn slice_rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let c = t.cols();
    Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec())
}

/// Consecutive non-overlapping `window`-frame slices.
pub fn windows(t: &Tensor, window: usize) -> Vec<Tensor> {
    (0..t.rows() / window.max(1))
        .map(|w| slice_rows(t, w * window, (w + 1) * window))
        .collect()
}

/// FID between the `w`-th window slices of the two sets, for every window
/// index both sets reach.
pub fn fid_over_time(
    generated: &[&Tensor],
    real: &[&Tensor],
    classifier: &StyleClassifier,
    window: usize,
) -> Result<Vec<(usize, f64)>> {
    if window == 0 {
        return Err(Error::invalid("fid_over_time: window must be >= 1"));
    }
    let shortest = generated.iter().chain(real).map(|t| t.rows()).min().unwrap_or(0);
    if shortest < window {
        return Err(Error::invalid(alloc::format!(
            "fid_over_time: {window}-frame window is longer than a {shortest}-frame sequence"
        )));
    }
    let count = shortest / window;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let cut = |set: &[&Tensor]| -> Vec<Tensor> { set.iter().map(|t| slice_rows(t, w * window, (w + 1) * window)).collect() };
        let g = cut(generated);
        let r = cut(real);
        let fg = classifier.features(&g.iter().collect::<Vec<_>>())?;
        let fr = classifier.features(&r.iter().collect::<Vec<_>>())?;
        out.push((w, fid(&fg, &fr)?));
    }
    Ok(out)
}

/// Least-squares slope of a series against its index.
pub fn slope(series: &[(usize, f64)]) -> f64 {
    let n = series.len() as f64;
    if series.len() < 2 {
        return 0.0;
    }
    let mx = series.iter().map(|s| s.0 as f64).sum::<f64>() / n;
    let my = series.iter().map(|s| s.1).sum::<f64>() / n;
    let sxy: f64 = series.iter().map(|s| (s.0 as f64 - mx) * (s.1 - my)).sum();
    let sxx: f64 = series.iter().map(|s| (s.0 as f64 - mx).powi(2)).sum();
    sxy / sxx
}

/// Mean frame-to-frame Euclidean displacement over rows `start..end`.
pub fn mean_displacement(poses: &Tensor, start: usize, end: usize) -> f64 {
    let end = end.min(poses.rows());
    if end <= start + 1 {
        return 0.0;
    }
    let total: f64 = (start + 1..end).map(|t| diversity::euclidean(poses.row(t), poses.row(t - 1))).sum();
    total / (end - start - 1) as f64
}

/// `samples` free rollouts per clip, in raw pose coordinates.
pub fn generate_for_eval(model: &Model, dataset: &DanceDataset, samples: usize, seed: u64) -> Result<Vec<Vec<Tensor>>> {
    let mut out = Vec::with_capacity(dataset.clips.len());
    for (i, clip) in dataset.clips.iter().enumerate() {
        let music: Vec<&Tensor> = (0..samples).map(|_| &clip.music.frames).collect();
        let seeds: Vec<u64> = (0..samples)
            .map(|s| derive_seed(seed, &[stream::GENERATE, i as u64, s as u64]))
            .collect();
        let ys = model.generate_normalized(&music, &seeds)?;
        out.push(ys.iter().map(|y| model.pose_norm.invert(y)).collect());
    }
    Ok(out)
}

/// Scores `generated[i]` (dances for `dataset.clips[i]`'s music) against
/// the dataset's real poses. The classifier is trained on the real training
/// split.
pub fn evaluate(dataset: &DanceDataset, generated: &[Vec<Tensor>], cfg: &MetricsConfig, seed: u64) -> Result<MetricsReport> {
    if generated.len() != dataset.clips.len() {
        return Err(Error::invalid("evaluate: need generated dances for every clip"));
    }
    if generated.iter().any(Vec::is_empty) {
        return Err(Error::invalid("evaluate: a clip has no generated dances"));
    }
    let train: Vec<&Clip> = dataset.split(Split::Train).collect();
    let train_poses: Vec<&Tensor> = train.iter().map(|c| &c.pose.frames).collect();
    let train_labels: Vec<usize> = train.iter().map(|c| c.style).collect();
    let clf = StyleClassifier::train(&train_poses, &train_labels, &cfg.classifier, derive_seed(seed, &[stream::CLASSIFIER]))?;

    let all_gen: Vec<&Tensor> = generated.iter().flatten().collect();
    let gen_labels: Vec<usize> = dataset
        .clips
        .iter()
        .zip(generated)
        .flat_map(|(c, g)| core::iter::repeat_n(c.style, g.len()))
        .collect();
    let style_acc = clf.accuracy(&all_gen, &gen_labels)?;

    let dt = cfg.dt * dataset.fps;
    let (mut bk, mut bm, mut ba) = (0usize, 0usize, 0usize);
    for (clip, gens) in dataset.clips.iter().zip(generated) {
        let mus = musical_beats(clip, cfg.onset_threshold);
        if mus.is_empty() {
            continue;
        }
        for y in gens {
            let kin = kinematic_beats(y, cfg.window, cfg.prominence)?;
            let s = beat_coverage_hit(&kin, &mus, dt)?;
            bk += s.kinematic;
            bm += s.musical;
            ba += s.aligned;
        }
    }
    if bm == 0 {
        return Err(Error::invalid("evaluate: no musical beats in the dataset"));
    }
    let beat_coverage = bk as f64 / bm as f64;
    let beat_hit_rate = if bk == 0 { 0.0 } else { ba as f64 / bk as f64 };

    let gen_features = clf.features(&all_gen)?;
    let diversity = diversity(&gen_features, cfg.num_pairs, seed)?;
    let multimodality = if generated.iter().all(|g| g.len() >= 2) {
        let mut groups = Vec::with_capacity(generated.len());
        let mut k = 0;
        for g in generated {
            groups.push(gen_features[k..k + g.len()].to_vec());
            k += g.len();
        }
        Some(multimodality(&groups)?)
    } else {
        None
    };

    let window = libm::round(cfg.fid_window * dataset.fps) as usize;
    if window == 0 {
        return Err(Error::invalid("evaluate: fid window is shorter than a frame"));
    }
    let real: Vec<&Tensor> = dataset.clips.iter().map(|c| &c.pose.frames).collect();
    let win_feats = |set: &[&Tensor]| -> Result<Vec<Vec<f64>>> {
        let w: Vec<Tensor> = set.iter().flat_map(|t| windows(t, window)).collect();
        clf.features(&w.iter().collect::<Vec<_>>())
    };
    let fid_value = match fid(&win_feats(&all_gen)?, &win_feats(&real)?) {
        Ok(v) => Some(v),
        Err(Error::TooFewSamples { .. }) => None,
        Err(e) => return Err(e),
    };
    let fid_over_time = match fid_over_time(&all_gen, &real, &clf, window) {
        Ok(v) => v,
        Err(Error::TooFewSamples { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };

    Ok(MetricsReport {
        fid: fid_value,
        style_acc,
        beat_coverage,
        beat_hit_rate,
        diversity,
        multimodality,
        fid_over_time,
    })
}
