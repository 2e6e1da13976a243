//! Kinematic and musical beats, and beat matching.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Slack added to frame tolerances so that `|a - b| == dt` always matches.
const MATCH_EPS: f64 = 1e-9;

/// Per-frame movement spread: the square root of the summed per-coordinate
/// variance of the poses in a centered window of `w` frames. Frames whose
/// window would leave the sequence copy the nearest full window.
pub fn motion_sd(poses: &Tensor, w: usize) -> Result<Vec<f64>> {
    let (n, d) = poses.dims2("motion_sd")?;
    if w < 3 {
        return Err(Error::invalid("motion SD window must be >= 3"));
    }
    if n < w {
        return Err(Error::invalid(alloc::format!("{n} frames is shorter than the {w}-frame SD window")));
    }
    let half = w / 2;
    let first = half;
    let last = n - 1 - (w - 1 - half);
    let mut s = alloc::vec![0.0; n];
    for t in first..=last {
        let lo = t - half;
        let mut total = 0.0;
        for c in 0..d {
            let mean = (lo..lo + w).map(|i| poses.get(i, c)).sum::<f64>() / w as f64;
            total += (lo..lo + w).map(|i| (poses.get(i, c) - mean).powi(2)).sum::<f64>() / w as f64;
        }
        s[t] = libm::sqrt(total);
    }
    for t in 0..first {
        s[t] = s[first];
    }
    for t in last + 1..n {
        s[t] = s[last];
    }
    Ok(s)
}

/// Local minima of `s` with topographic prominence at least `min_prom`.
/// A flat run counts once, at its middle frame, when both neighbors are
/// higher.
pub fn prominent_minima(s: &[f64], min_prom: f64) -> Vec<usize> {
    let n = s.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if s[i] < s[i - 1] {
            let mut j = i;
            while j + 1 < n && s[j + 1] == s[i] {
                j += 1;
            }
            if j + 1 < n && s[j + 1] > s[i] {
                let v = s[i];
                let mut left = v;
                for k in (0..i).rev() {
                    if s[k] < v {
                        break;
                    }
                    left = left.max(s[k]);
                }
                let mut right = v;
                for &x in &s[j + 1..] {
                    if x < v {
                        break;
                    }
                    right = right.max(x);
                }
                if left.min(right) - v >= min_prom {
                    out.push((i + j) / 2);
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Frames where the movement spread dips: the direction of motion changes.
/// `prominence` is a fraction of the SD curve's range.
pub fn kinematic_beats(poses: &Tensor, w: usize, prominence: f64) -> Result<Vec<usize>> {
    let s = motion_sd(poses, w)?;
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Ok(Vec::new());
    }
    Ok(prominent_minima(&s, prominence * range))
}

/// Frames where a one-hot beat channel is set.
pub fn onehot_beats(channel: &[f64]) -> Vec<usize> {
    channel.iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i).collect()
}

/// Interior local maxima of an onset-strength curve above `threshold`; a
/// flat top counts once.
pub fn onset_beats(channel: &[f64], threshold: f64) -> Vec<usize> {
    let flipped: Vec<f64> = channel.iter().map(|v| -v).collect();
    prominent_minima(&flipped, 0.0)
        .into_iter()
        .filter(|&i| channel[i] > threshold)
        .collect()
}

/// Greedy one-to-one matching in time order: each beat of `a` takes the
/// earliest unused beat of `b` within `dt` frames. Returns the match count.
pub fn match_beats(a: &[usize], b: &[usize], dt: f64) -> usize {
    let mut used = alloc::vec![false; b.len()];
    let mut start = 0;
    let mut matched = 0;
    for &x in a {
        while start < b.len() && (b[start] as f64) < x as f64 - dt - MATCH_EPS {
            start += 1;
        }
        let mut k = start;
        while k < b.len() && (b[k] as f64) <= x as f64 + dt + MATCH_EPS {
            if !used[k] {
                used[k] = true;
                matched += 1;
                break;
            }
            k += 1;
        }
    }
    matched
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeatScores {
    pub coverage: f64,
    pub hit_rate: f64,
    pub kinematic: usize,
    pub musical: usize,
    pub aligned: usize,
}

/// Coverage `B_k / B_m` and hit rate `B_a / B_k` (0 when there are no
/// kinematic beats).
pub fn beat_coverage_hit(kin: &[usize], mus: &[usize], dt: f64) -> Result<BeatScores> {
    if mus.is_empty() {
        return Err(Error::invalid("beat coverage is undefined without musical beats"));
    }
    if !(dt >= 0.0) {
        return Err(Error::invalid("beat tolerance must be >= 0"));
    }
    let aligned = match_beats(kin, mus, dt);
    Ok(BeatScores {
        coverage: kin.len() as f64 / mus.len() as f64,
        hit_rate: if kin.is_empty() { 0.0 } else { aligned as f64 / kin.len() as f64 },
        kinematic: kin.len(),
        musical: mus.len(),
        aligned,
    })
}

/// Fraction of `a`'s beats matched one-to-one by a beat of `b` within `dt`.
pub fn beat_alignment_ratio(a: &[usize], b: &[usize], dt: f64) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::invalid("beat alignment ratio needs at least one reference beat"));
    }
    Ok(match_beats(a, b, dt) as f64 / a.len() as f64)
}
