//! Dynamic auto-condition curriculum.
//!
//! During training the decoder input sequence alternates `p` of the model's
//! own predictions with `q` ground-truth frames: `y0, ŷ1..ŷp, y(p+1)..y(p+q),
//! ŷ(p+q+1), ...`. `q` is fixed; `p` grows with the epoch count through a
//! growth function, moving training from pure teacher forcing towards free
//! running. The loss target is always the full ground truth.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::{decode_step, DecoderVars, StateVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthKind {
    Constant,
    Linear,
    Quadratic,
    Exponential,
    TeacherForcing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub kind: GrowthKind,
    pub lambda: f64,
    pub q: usize,
    pub const_p: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            kind: GrowthKind::Linear,
            lambda: 0.01,
            q: 10,
            const_p: 0,
        }
    }
}

impl CurriculumSchedule {
    pub fn teacher_forcing() -> Self {
        Self {
            kind: GrowthKind::TeacherForcing,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("curriculum.lambda must be positive"));
        }
        if self.q == 0 {
            return Err(Error::invalid("curriculum.q must be >= 1"));
        }
        Ok(())
    }

    /// Predicted-block length `p` after `epoch` completed epochs.
    pub fn p_of_epoch(&self, epoch: usize) -> usize {
        let t = epoch as f64;
        let raw = match self.kind {
            GrowthKind::Constant => return self.const_p,
            GrowthKind::TeacherForcing => return 0,
            GrowthKind::Linear => self.lambda * t,
            GrowthKind::Quadratic => self.lambda * t * t,
            GrowthKind::Exponential => self.lambda * libm::exp(t),
        };
        let p = libm::floor(raw);
        if p >= usize::MAX as f64 || p.is_nan() {
            usize::MAX
        } else {
            p as usize
        }
    }

    /// [`CurriculumSchedule::p_of_epoch`] capped at the sequence length.
    pub fn p_for(&self, epoch: usize, steps: usize) -> usize {
        self.p_of_epoch(epoch).min(steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feed {
    Pred,
    Gt,
}

/// Which source feeds the input of the *next* step after each frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedMask(Vec<Feed>);

impl FeedMask {
    pub fn all(n: usize, feed: Feed) -> Self {
        Self(alloc::vec![feed; n])
    }

    pub fn from_flags(flags: Vec<Feed>) -> Self {
        Self(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Feed] {
        &self.0
    }

    pub fn is_teacher_forcing(&self) -> bool {
        self.0.iter().all(|&f| f == Feed::Gt)
    }
}

/// `p` predicted steps, `q` ground-truth steps, repeating, truncated at `n`.
pub fn build_feed_mask(n: usize, p: usize, q: usize) -> FeedMask {
    let period = p + q;
    FeedMask(
        (0..n)
            .map(|i| if period > 0 && i % period < p { Feed::Pred } else { Feed::Gt })
            .collect(),
    )
}

/// Origin of each step's decoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSource {
    Bop,
    Predicted,
    GroundTruth,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// One `batch x d_y` prediction per step.
    pub preds: Vec<Var>,
    pub inputs: Vec<InputSource>,
    pub final_state: StateVars,
}

/// Batched rollout under a feed mask.
///
/// `z` and `y_gt` stack the batch's sequences vertically (`batch * n` rows,
/// sequence-major); `y0` is `batch x d_y`. Step 0 consumes `y0`; step
/// `i > 0` consumes the prediction for frame `i - 1` when `mask[i - 1]` is
/// [`Feed::Pred`] and the ground truth otherwise. With `detach` the fed-back
/// predictions are cut from the gradient path.
#[allow(clippy::too_many_arguments)]
pub fn scheduled_rollout(
    g: &mut Graph,
    vars: &DecoderVars,
    z: Var,
    y_gt: Var,
    y0: Var,
    batch: usize,
    mask: &FeedMask,
    state: StateVars,
    detach: bool,
) -> Result<Rollout> {
    let n = mask.len();
    if batch == 0 || n == 0 {
        return Err(Error::invalid("scheduled_rollout: empty batch or mask"));
    }
    let zr = g.value(z).rows();
    let yr = g.value(y_gt).rows();
    if zr != batch * n || yr != batch * n {
        return Err(Error::invalid(alloc::format!(
            "scheduled_rollout: mask length {n} x batch {batch} does not match {zr} latent rows and {yr} target rows"
        )));
    }
    if g.value(y0).rows() != batch {
        return Err(Error::invalid("scheduled_rollout: y0 must have one row per sequence"));
    }

    let rows_at = |t: usize| -> Vec<usize> { (0..batch).map(|b| b * n + t).collect() };
    let mut preds = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n);
    let mut state = state;
    let mut prev = y0;
    for i in 0..n {
        if i == 0 {
            inputs.push(InputSource::Bop);
        } else {
            match mask.as_slice()[i - 1] {
                Feed::Pred => {
                    inputs.push(InputSource::Predicted);
                    prev = if detach { g.detach(preds[i - 1]) } else { preds[i - 1] };
                }
                Feed::Gt => {
                    inputs.push(InputSource::GroundTruth);
                    prev = g.gather_rows(y_gt, &rows_at(i - 1))?;
                }
            }
        }
        let zi = g.gather_rows(z, &rows_at(i))?;
        let (next, y) = decode_step(g, vars, &state, prev, zi)?;
        state = next;
        preds.push(y);
    }
    Ok(Rollout {
        preds,
        inputs,
        final_state: state,
    })
}
