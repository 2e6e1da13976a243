//! Music-feature and pose sequences, datasets, and the pure preprocessing
//! steps applied to them.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Body-25 keyjoints, two coordinates each.
pub const NUM_JOINTS: usize = 25;
pub const POSE_DIM: usize = 2 * NUM_JOINTS;
pub const NECK: usize = 1;
pub const MID_HIP: usize = 8;

pub const DEFAULT_FPS: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub width: usize,
}

/// Ordered channel groups of a music-feature matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureLayout {
    pub groups: Vec<FeatureGroup>,
}

impl Default for FeatureLayout {
    /// mfcc 20, mfcc_delta 20, chroma 12, tempogram 384, onset 1, beat_onehot 1.
    fn default() -> Self {
        Self::new(&[
            ("mfcc", 20),
            ("mfcc_delta", 20),
            ("chroma", 12),
            ("tempogram", 384),
            ("onset", 1),
            ("beat_onehot", 1),
        ])
    }
}

impl FeatureLayout {
    pub fn new(groups: &[(&str, usize)]) -> Self {
        Self {
            groups: groups
                .iter()
                .map(|&(name, width)| FeatureGroup {
                    name: name.to_string(),
                    width,
                })
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.groups.iter().map(|g| g.width).sum()
    }

    /// Column range of the named group.
    pub fn range(&self, name: &str) -> Option<core::ops::Range<usize>> {
        let mut start = 0;
        for g in &self.groups {
            if g.name == name {
                return Some(start..start + g.width);
            }
            start += g.width;
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MusicFeatureSequence {
    pub frames: Tensor,
    pub layout: FeatureLayout,
    pub fps: f64,
}

impl MusicFeatureSequence {
    pub fn new(frames: Tensor, layout: FeatureLayout, fps: f64) -> Result<Self> {
        let (_, w) = frames.dims2("music features")?;
        if w != layout.width() {
            return Err(Error::invalid(format!(
                "music features are {w} wide but the layout declares {}",
                layout.width()
            )));
        }
        Ok(Self { frames, layout, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First column of a named group, one value per frame.
    pub fn channel(&self, name: &str) -> Option<Vec<f64>> {
        let r = self.layout.range(name)?;
        Some((0..self.len()).map(|t| self.frames.get(t, r.start)).collect())
    }
}

/// Horizontally concatenates named groups in `layout` order.
pub fn assemble_features(
    groups: &[(&str, Tensor)],
    layout: &FeatureLayout,
    fps: f64,
) -> Result<MusicFeatureSequence> {
    let mut parts = Vec::with_capacity(layout.groups.len());
    let mut frames = None;
    for spec in &layout.groups {
        let Some((_, t)) = groups.iter().find(|(n, _)| *n == spec.name) else {
            return Err(Error::FeatureGroup {
                group: spec.name.clone(),
                reason: "missing".into(),
            });
        };
        let (rows, cols) = t.dims2("assemble_features").map_err(|_| Error::FeatureGroup {
            group: spec.name.clone(),
            reason: "not a matrix".into(),
        })?;
        if cols != spec.width {
            return Err(Error::FeatureGroup {
                group: spec.name.clone(),
                reason: format!("width {cols}, layout expects {}", spec.width),
            });
        }
        match frames {
            None => frames = Some(rows),
            Some(n) if n != rows => {
                return Err(Error::FeatureGroup {
                    group: spec.name.clone(),
                    reason: format!("{rows} frames, expected {n}"),
                })
            }
            _ => {}
        }
        parts.push(t);
    }
    for (name, _) in groups {
        if layout.range(name).is_none() {
            return Err(Error::FeatureGroup {
                group: (*name).into(),
                reason: "not in layout".into(),
            });
        }
    }
    let n = frames.ok_or_else(|| Error::invalid("empty feature layout"))?;
    let width = layout.width();
    let mut data = Vec::with_capacity(n * width);
    for t in 0..n {
        for p in &parts {
            data.extend_from_slice(p.row(t));
        }
    }
    MusicFeatureSequence::new(Tensor::matrix(n, width, data), layout.clone(), fps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub frames: Tensor,
    pub fps: f64,
}

impl PoseSequence {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self> {
        let (_, w) = frames.dims2("pose sequence")?;
        if w != POSE_DIM {
            return Err(Error::invalid(format!("poses must be {POSE_DIM} wide, got {w}")));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("pose sequence".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joint(&self, t: usize, j: usize) -> (f64, f64) {
        (self.frames.get(t, 2 * j), self.frames.get(t, 2 * j + 1))
    }

    /// A joint whose two coordinates are both exactly zero was not detected.
    pub fn is_missing(&self, t: usize, j: usize) -> bool {
        self.joint(t, j) == (0.0, 0.0)
    }
}

/// Fills undetected joints by per-joint linear interpolation between the
/// nearest frames where that joint is present; leading and trailing gaps copy
/// the nearest present value.
pub fn interpolate_missing(poses: &PoseSequence) -> Result<PoseSequence> {
    let n = poses.len();
    let mut out = poses.frames.clone();
    for j in 0..NUM_JOINTS {
        let present: Vec<usize> = (0..n).filter(|&t| !poses.is_missing(t, j)).collect();
        let (&first, &last) = match (present.first(), present.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::JointAlwaysMissing(j)),
        };
        for t in 0..first {
            out.set(t, 2 * j, poses.frames.get(first, 2 * j));
            out.set(t, 2 * j + 1, poses.frames.get(first, 2 * j + 1));
        }
        for t in last + 1..n {
            out.set(t, 2 * j, poses.frames.get(last, 2 * j));
            out.set(t, 2 * j + 1, poses.frames.get(last, 2 * j + 1));
        }
        for w in present.windows(2) {
            let (a, b) = (w[0], w[1]);
            let span = (b - a) as f64;
            for t in a + 1..b {
                let s = (t - a) as f64 / span;
                for c in [2 * j, 2 * j + 1] {
                    let (va, vb) = (poses.frames.get(a, c), poses.frames.get(b, c));
                    out.set(t, c, va + s * (vb - va));
                }
            }
        }
    }
    Ok(PoseSequence {
        frames: out,
        fps: poses.fps,
    })
}

/// Global affine pose normalization: subtract the mean mid-hip position,
/// divide by the mean neck-to-hip length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNormalizer {
    pub center: [f64; 2],
    pub scale: f64,
}

impl Default for PoseNormalizer {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0],
            scale: 1.0,
        }
    }
}

impl PoseNormalizer {
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a PoseSequence>) -> Result<Self> {
        let (mut cx, mut cy, mut torso, mut count) = (0.0, 0.0, 0.0, 0usize);
        for s in seqs {
            for t in 0..s.len() {
                let (hx, hy) = s.joint(t, MID_HIP);
                let (nx, ny) = s.joint(t, NECK);
                cx += hx;
                cy += hy;
                torso += libm::sqrt((nx - hx) * (nx - hx) + (ny - hy) * (ny - hy));
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("cannot fit a normalizer on no frames"));
        }
        let c = count as f64;
        let scale = torso / c;
        if !(scale > 0.0) {
            return Err(Error::invalid("degenerate torso length"));
        }
        Ok(Self {
            center: [cx / c, cy / c],
            scale,
        })
    }

    pub fn apply(&self, frames: &Tensor) -> Tensor {
        let mut out = frames.clone();
        for row in out.data_mut().chunks_mut(POSE_DIM.min(frames.cols())) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - self.center[i % 2]) / self.scale;
            }
        }
        out
    }

    pub fn invert(&self, frames: &Tensor) -> Tensor {
        let mut out = frames.clone();
        for row in out.data_mut().chunks_mut(POSE_DIM.min(frames.cols())) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * self.scale + self.center[i % 2];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub music: MusicFeatureSequence,
    pub pose: PoseSequence,
    pub style: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DanceDataset {
    pub layout: FeatureLayout,
    pub fps: f64,
    pub clips: Vec<Clip>,
}

impl DanceDataset {
    /// Rejects misaligned pairs and layout mismatches.
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.clips.iter().enumerate() {
            if c.music.len() != c.pose.len() {
                return Err(Error::invalid(format!(
                    "clip {i}: {} music frames but {} pose frames",
                    c.music.len(),
                    c.pose.len()
                )));
            }
            if c.music.layout != self.layout {
                return Err(Error::invalid(format!("clip {i}: feature layout differs from the dataset")));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Clip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn num_styles(&self) -> usize {
        self.clips.iter().map(|c| c.style + 1).max().unwrap_or(0)
    }
}
