//! Clip files and dataset manifests.
//!
//! A clip file is UTF-8 text: a header `#frames=<n> width=<d> fps=<f>`, then
//! one frame per line as space-separated floats printed with 17 significant
//! digits. Later lines starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use choreo_core::data::{Clip, DanceDataset, FeatureLayout, MusicFeatureSequence, PoseSequence, Split};
use choreo_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq)]
pub struct ClipFile {
    pub frames: Tensor,
    pub fps: f64,
}

pub fn format_clip(frames: &Tensor, fps: f64, comments: &[&str]) -> String {
    let (n, d) = (frames.rows(), frames.cols());
    let mut out = String::with_capacity(n * d * 24 + 64);
    let _ = writeln!(out, "#frames={n} width={d} fps={fps}");
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    for t in 0..n {
        for (i, v) in frames.row(t).iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

fn header_field<'a>(path: &Path, fields: &[(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| CliError::Parse {
            path: path.into(),
            line: 1,
            msg: format!("header lacks `{key}=`"),
        })
}

pub fn parse_clip(path: &Path, text: &str) -> Result<ClipFile> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, msg: String| CliError::Parse {
        path: path.into(),
        line,
        msg,
    };
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
    let body = header
        .strip_prefix("#frames=")
        .map(|rest| format!("frames={rest}"))
        .ok_or_else(|| bad(1, "expected `#frames=<n> width=<d> fps=<f>`".into()))?;
    let fields: Vec<(&str, &str)> = body.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
    let n: usize = header_field(path, &fields, "frames")?
        .parse()
        .map_err(|e| bad(1, format!("frames: {e}")))?;
    let d: usize = header_field(path, &fields, "width")?
        .parse()
        .map_err(|e| bad(1, format!("width: {e}")))?;
    let fps: f64 = header_field(path, &fields, "fps")?
        .parse()
        .map_err(|e| bad(1, format!("fps: {e}")))?;
    if !(fps > 0.0) {
        return Err(bad(1, "fps must be positive".into()));
    }

    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| bad(lineno, format!("not a number: `{tok}`")))?;
            if !v.is_finite() {
                return Err(bad(lineno, format!("non-finite value `{tok}`")));
            }
            data.push(v);
        }
        if data.len() - before != d {
            return Err(bad(lineno, format!("{} values, header declares width {d}", data.len() - before)));
        }
        rows += 1;
    }
    if rows != n {
        return Err(bad(1, format!("header declares {n} frames, file holds {rows}")));
    }
    Ok(ClipFile {
        frames: Tensor::matrix(n, d, data),
        fps,
    })
}

pub fn read_clip(path: &Path) -> Result<ClipFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_clip(path, &text)
}

pub fn write_clip(path: &Path, frames: &Tensor, fps: f64, comments: &[&str]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, format_clip(frames, fps, comments)).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub music_file: String,
    pub pose_file: String,
    pub style: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub layout: FeatureLayout,
    pub fps: f64,
    pub clips: Vec<ClipEntry>,
}

/// Writes the manifest plus one music and one pose file per clip.
pub fn save_dataset(dir: &Path, ds: &DanceDataset) -> Result<()> {
    fs::create_dir_all(dir.join("clips")).map_err(|e| CliError::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.clips.len());
    for (i, c) in ds.clips.iter().enumerate() {
        let music_file = format!("clips/{i:04}.music.txt");
        let pose_file = format!("clips/{i:04}.pose.txt");
        write_clip(&dir.join(&music_file), &c.music.frames, c.music.fps, &[])?;
        write_clip(&dir.join(&pose_file), &c.pose.frames, c.pose.fps, &[])?;
        entries.push(ClipEntry {
            music_file,
            pose_file,
            style: c.style,
            split: c.split,
        });
    }
    let manifest = DatasetManifest {
        layout: ds.layout.clone(),
        fps: ds.fps,
        clips: entries,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.into(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn resolve(dir: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.into()
    } else {
        dir.join(p)
    }
}

/// Loads a dataset directory, rejecting missing files, layout mismatches and
/// misaligned pairs.
pub fn load_dataset(dir: &Path) -> Result<DanceDataset> {
    let mpath = dir.join(MANIFEST);
    let manifest: DatasetManifest = read_json(&mpath)?;
    let width = manifest.layout.width();
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for (i, e) in manifest.clips.iter().enumerate() {
        let music_path = resolve(dir, &e.music_file);
        let pose_path = resolve(dir, &e.pose_file);
        let music = read_clip(&music_path)?;
        let pose = read_clip(&pose_path)?;
        if music.frames.cols() != width {
            return Err(CliError::format(
                &music_path,
                format!("width {} does not match the manifest layout width {width}", music.frames.cols()),
            ));
        }
        if music.frames.rows() != pose.frames.rows() {
            return Err(CliError::format(
                &mpath,
                format!(
                    "clip {i}: {} music frames vs {} pose frames",
                    music.frames.rows(),
                    pose.frames.rows()
                ),
            ));
        }
        clips.push(Clip {
            music: MusicFeatureSequence::new(music.frames, manifest.layout.clone(), music.fps)?,
            pose: PoseSequence::new(pose.frames, pose.fps)?,
            style: e.style,
            split: e.split,
        });
    }
    let ds = DanceDataset {
        layout: manifest.layout,
        fps: manifest.fps,
        clips,
    };
    ds.validate()?;
    Ok(ds)
}
