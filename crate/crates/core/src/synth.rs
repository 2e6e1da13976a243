//! Synthetic music/dance corpus with planted beats.
//!
//! Each clip gets a beat grid `t0 + k * period`. The music carries the grid
//! in its onset and beat channels; the dancer oscillates with
//! `cos(π (t - t0) / period)`, so every limb reverses direction exactly on a
//! beat. Styles differ in period, in which joints move, and in the means of
//! the noise channels.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Clip, DanceDataset, FeatureLayout, MusicFeatureSequence, PoseSequence, Split, NUM_JOINTS, POSE_DIM};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, stream, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub styles: usize,
    pub clips_per_style: usize,
    pub frames: usize,
    pub fps: f64,
    pub seed: u64,
    pub test_fraction: f64,
    /// Pose noise standard deviation, in pixels.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            styles: 3,
            clips_per_style: 20,
            frames: 240,
            fps: 15.0,
            seed: 0,
            test_fraction: 0.1,
            noise: 0.3,
        }
    }
}

/// Beat period of `style`, in frames.
pub fn style_period(style: usize) -> usize {
    8 + 2 * style
}

/// Rest pose relative to the mid hip, torso length 100, y pointing down.
const SKELETON: [(f64, f64); NUM_JOINTS] = [
    (0.0, -150.0),
    (0.0, -100.0),
    (-30.0, -100.0),
    (-45.0, -60.0),
    (-50.0, -20.0),
    (30.0, -100.0),
    (45.0, -60.0),
    (50.0, -20.0),
    (0.0, 0.0),
    (-15.0, 0.0),
    (-18.0, 50.0),
    (-20.0, 100.0),
    (15.0, 0.0),
    (18.0, 50.0),
    (20.0, 100.0),
    (-6.0, -158.0),
    (6.0, -158.0),
    (-12.0, -152.0),
    (12.0, -152.0),
    (28.0, 108.0),
    (32.0, 106.0),
    (18.0, 104.0),
    (-28.0, 108.0),
    (-32.0, 106.0),
    (-18.0, 104.0),
];

const ORIGIN: (f64, f64) = (250.0, 250.0);

/// Per-joint oscillation amplitude `(dx, dy)` of a style.
fn signature(style: usize) -> [(f64, f64); NUM_JOINTS] {
    let mut a = [(0.0, 0.0); NUM_JOINTS];
    match style % 3 {
        0 => {
            // arms pump up and down
            for (j, dy) in [(2, 4.0), (3, 16.0), (4, 30.0), (5, 4.0), (6, 16.0), (7, 30.0)] {
                a[j] = (0.0, dy);
            }
        }
        1 => {
            // upper body sways sideways, more at the top
            for (j, &(_, y)) in SKELETON.iter().enumerate() {
                if y < 0.0 {
                    a[j] = (-y * 0.15, 0.0);
                }
            }
            a[8] = (4.0, 0.0);
        }
        _ => {
            // knees bend, everything above drops
            for (j, &(_, y)) in SKELETON.iter().enumerate() {
                if y <= 50.0 {
                    a[j] = (0.0, 10.0);
                }
            }
            a[10] = (-8.0, 5.0);
            a[13] = (8.0, 5.0);
        }
    }
    // styles beyond three reuse a signature at a different scale
    let k = 1.0 + 0.25 * (style / 3) as f64;
    a.iter_mut().for_each(|v| *v = (v.0 * k, v.1 * k));
    a
}

fn style_means(style: usize, width: usize) -> Vec<f64> {
    let mut rng = rng_for(0x5eed, &[stream::SYNTH, u64::MAX, style as u64]);
    (0..width).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Stationary AR(1) noise around per-channel means.
fn ar_noise(rng: &mut Rng, n: usize, means: &[f64], rho: f64, sd: f64) -> Tensor {
    let w = means.len();
    let mut t = Tensor::zeros(&[n, w]);
    let stat = sd / libm::sqrt(1.0 - rho * rho);
    let mut state: Vec<f64> = (0..w).map(|_| stat * rng.sample::<f64, _>(StandardNormal)).collect();
    for i in 0..n {
        for (c, s) in state.iter_mut().enumerate() {
            if i > 0 {
                *s = rho * *s + sd * rng.sample::<f64, _>(StandardNormal);
            }
            t.set(i, c, means[c] + *s);
        }
    }
    t
}

/// Frames of the planted beat grid.
pub fn beat_grid(n: usize, t0: usize, period: usize) -> Vec<usize> {
    (t0..n).step_by(period).collect()
}

fn music(rng: &mut Rng, layout: &FeatureLayout, n: usize, style: usize, beats: &[usize], period: usize, fps: f64) -> Result<MusicFeatureSequence> {
    let mut groups: Vec<(&str, Tensor)> = Vec::new();
    for g in &layout.groups {
        let w = g.width;
        let means = style_means(style, w);
        let t = match g.name.as_str() {
            "onset" => {
                let mut t = Tensor::zeros(&[n, w]);
                for i in 0..n {
                    let v: f64 = beats
                        .iter()
                        .map(|&b| {
                            let d = i as f64 - b as f64;
                            libm::exp(-0.5 * d * d)
                        })
                        .sum();
                    t.row_mut(i).iter_mut().for_each(|x| *x = v);
                }
                t
            }
            "beat_onehot" => {
                let mut t = Tensor::zeros(&[n, w]);
                for &b in beats {
                    t.row_mut(b).iter_mut().for_each(|x| *x = 1.0);
                }
                t
            }
            "tempogram" => {
                let mut t = ar_noise(rng, n, &vec![0.0; w], 0.5, 0.02);
                for i in 0..n {
                    for (lag, x) in t.row_mut(i).iter_mut().enumerate() {
                        let d = lag as f64 - period as f64;
                        *x += libm::exp(-0.5 * d * d);
                    }
                }
                t
            }
            "mfcc_delta" => continue,
            _ => ar_noise(rng, n, &means, 0.8, 0.3),
        };
        groups.push((g.name.as_str(), t));
    }
    if let Some(r) = layout.range("mfcc_delta") {
        let base = groups
            .iter()
            .find(|(name, _)| *name == "mfcc")
            .map(|(_, t)| t.clone())
            .filter(|t| t.cols() == r.len());
        let delta = match base {
            Some(m) => {
                let mut d = Tensor::zeros(&[n, r.len()]);
                for i in 1..n {
                    for c in 0..r.len() {
                        d.set(i, c, m.get(i, c) - m.get(i - 1, c));
                    }
                }
                d
            }
            None => ar_noise(rng, n, &vec![0.0; r.len()], 0.0, 0.3),
        };
        groups.push(("mfcc_delta", delta));
    }
    crate::data::assemble_features(&groups, layout, fps)
}

fn dance(rng: &mut Rng, n: usize, style: usize, t0: usize, period: usize, noise: f64, fps: f64) -> Result<PoseSequence> {
    let amp = signature(style);
    let gain = rng.gen_range(0.8..1.2);
    let shift = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
    let jitter = Normal::new(0.0, noise).map_err(|_| Error::invalid("synth noise must be finite and >= 0"))?;
    let mut t = Tensor::zeros(&[n, POSE_DIM]);
    for i in 0..n {
        let phase = libm::cos(core::f64::consts::PI * (i as f64 - t0 as f64) / period as f64);
        for j in 0..NUM_JOINTS {
            let (bx, by) = SKELETON[j];
            let (ax, ay) = amp[j];
            t.set(i, 2 * j, ORIGIN.0 + shift.0 + bx + gain * ax * phase + jitter.sample(rng));
            t.set(i, 2 * j + 1, ORIGIN.1 + shift.1 + by + gain * ay * phase + jitter.sample(rng));
        }
    }
    PoseSequence::new(t, fps)
}

/// Generates one clip from its own seed.
pub fn synth_clip(layout: &FeatureLayout, spec: &SynthSpec, style: usize, seed: u64) -> Result<Clip> {
    let mut rng = Rng::seed_from_u64(seed);
    let period = style_period(style);
    if spec.frames < 2 * period {
        return Err(Error::invalid(alloc::format!(
            "synthetic clips need at least {} frames for style {style}",
            2 * period
        )));
    }
    let t0 = 3 + rng.gen_range(0..period);
    let beats = beat_grid(spec.frames, t0, period);
    let music = music(&mut rng, layout, spec.frames, style, &beats, period, spec.fps)?;
    let pose = dance(&mut rng, spec.frames, style, t0, period, spec.noise, spec.fps)?;
    Ok(Clip {
        music,
        pose,
        style,
        split: Split::Train,
    })
}

/// A stratified corpus: `test_fraction` of each style's clips (rounded) go to
/// the test split.
pub fn synth_corpus(spec: &SynthSpec, layout: &FeatureLayout) -> Result<DanceDataset> {
    if spec.styles == 0 || spec.clips_per_style == 0 {
        return Err(Error::invalid("synth: need at least one style and one clip per style"));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::invalid("synth: test_fraction must be in [0, 1)"));
    }
    let mut clips = Vec::with_capacity(spec.styles * spec.clips_per_style);
    for style in 0..spec.styles {
        for k in 0..spec.clips_per_style {
            let seed = derive_seed(spec.seed, &[stream::SYNTH, style as u64, k as u64]);
            clips.push(synth_clip(layout, spec, style, seed)?);
        }
    }
    let n_test = libm::round(spec.test_fraction * spec.clips_per_style as f64) as usize;
    let mut rng = rng_for(spec.seed, &[stream::SPLIT]);
    for style in 0..spec.styles {
        let mut idx: Vec<usize> = (0..spec.clips_per_style).map(|k| style * spec.clips_per_style + k).collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(n_test) {
            clips[i].split = Split::Test;
        }
    }
    let ds = DanceDataset {
        layout: layout.clone(),
        fps: spec.fps,
        clips,
    };
    ds.validate()?;
    Ok(ds)
}

/// Frames where the clip's beat channel is set.
pub fn planted_beats(clip: &Clip) -> Vec<usize> {
    clip.music
        .channel("beat_onehot")
        .map(|c| c.iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i).collect())
        .unwrap_or_default()
}
