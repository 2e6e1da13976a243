//! ℓ1 sequence loss and the epoch loop.
//!
//! The trainer has no clock and no filesystem access. Callers time epochs
//! and write checkpoints between calls to [`Trainer::run_epoch`].

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adam::{clip_global_norm, AdamConfig, AdamState};
use crate::curriculum::{build_feed_mask, scheduled_rollout, CurriculumSchedule, FeedMask};
use crate::decoder::{init_state, DecoderVars, StateVars};
use crate::encoder::{encode, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Model, TrainPair};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(rename = "batch")]
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Cut gradients through fed-back predictions.
    pub detach: bool,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            clip_norm: Some(5.0),
            detach: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("train.lr must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("train.clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub p: usize,
    /// Mean over sequences of the summed absolute error.
    pub loss: f64,
    pub loss_per_elem: f64,
    /// Wall time, filled in by the caller.
    pub seconds: f64,
}

/// `(1/N) Σ_i ||Ŷ_i − Y_i||₁` over a batch of `n` sequences stacked into
/// `pred` and `target`.
pub fn l1_loss(g: &mut Graph, pred: Var, target: Var, n: usize) -> Result<Var> {
    if n == 0 {
        return Err(Error::invalid("l1_loss: empty batch"));
    }
    let diff = g.sub(pred, target)?;
    let total = g.abs_sum(diff);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Value-only [`l1_loss`] over per-sequence tensors.
pub fn l1_loss_values(pred: &[Tensor], target: &[Tensor]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::invalid("l1_loss: batch sizes differ or are empty"));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(Error::shape("l1_loss", p.shape(), t.shape()));
        }
        total += p.data().iter().zip(t.data()).map(|(a, b)| libm::fabs(a - b)).sum::<f64>();
    }
    Ok(total / pred.len() as f64)
}

/// Builds the loss graph for one batch and returns it with the graph.
fn batch_graph(
    model: &Model,
    data: &[TrainPair],
    batch: &[usize],
    mask: &FeedMask,
    seeds: &[u64],
    detach: bool,
    trainable: bool,
) -> Result<(Graph, Var, Vec<Var>)> {
    let cfg = &model.config;
    let n = data[batch[0]].y.rows();
    let d_y = cfg.decoder.d_y;
    for &i in batch {
        if data[i].y.rows() != n || data[i].x.rows() != n {
            return Err(Error::invalid("sequences in a batch must share one length"));
        }
        if data[i].y.cols() != d_y {
            return Err(Error::shape("train", &[n, d_y], data[i].y.shape()));
        }
    }
    let b = batch.len();
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, trainable);
    let enc = EncoderVars::resolve(&cfg.encoder, &bound)?;
    let dec = DecoderVars::resolve(&cfg.decoder, &bound)?;

    let mut zs = Vec::with_capacity(b);
    let mut y_seq = Vec::with_capacity(b * n * d_y);
    for &i in batch {
        let x = g.constant(data[i].x.clone());
        zs.push(encode(&mut g, &cfg.encoder, &enc, x)?.z);
        y_seq.extend_from_slice(data[i].y.data());
    }
    let z = g.concat_rows(&zs)?;
    let y_gt = g.constant(Tensor::matrix(b * n, d_y, y_seq));
    let mut y0 = Tensor::zeros(&[b, d_y]);
    for r in 0..b {
        y0.row_mut(r).copy_from_slice(&model.bop);
    }
    let y0 = g.constant(y0);
    let state = StateVars::constant(&mut g, &init_state(&cfg.decoder, seeds));
    let rollout = scheduled_rollout(&mut g, &dec, z, y_gt, y0, b, mask, state, detach)?;

    // predictions are step-major (t * b + seq); match the target to them
    let pred = g.concat_rows(&rollout.preds)?;
    let mut target = Tensor::zeros(&[n * b, d_y]);
    for t in 0..n {
        for (k, &i) in batch.iter().enumerate() {
            target.row_mut(t * b + k).copy_from_slice(data[i].y.row(t));
        }
    }
    let target = g.constant(target);
    let loss = l1_loss(&mut g, pred, target, b)?;
    let vars = bound.vars().to_vec();
    Ok((g, loss, vars))
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub schedule: CurriculumSchedule,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, schedule: CurriculumSchedule) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let optimizer = AdamState::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &model.params,
        );
        Ok(Self {
            model,
            optimizer,
            config,
            schedule,
            epoch: 0,
            log: Vec::new(),
        })
    }

    /// Seed of sequence `index`'s initial decoder state in `epoch`.
    pub fn h0_seed(&self, epoch: usize, index: usize) -> u64 {
        derive_seed(self.config.seed, &[stream::H0, epoch as u64, index as u64])
    }

    /// Batches of dataset indices for `epoch`, in a seeded shuffled order.
    pub fn batches(&self, epoch: usize, len: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng_for(self.config.seed, &[stream::SHUFFLE, epoch as u64]));
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// One epoch under the schedule's `p`.
    pub fn run_epoch(&mut self, data: &[TrainPair]) -> Result<EpochRecord> {
        let q = self.schedule.q;
        self.run_epoch_with(data, |p, n| build_feed_mask(n, p, q))
    }

    /// One epoch with caller-built feed masks; `masks(p, n)` receives the
    /// schedule's `p` and the sequence length.
    pub fn run_epoch_with(&mut self, data: &[TrainPair], masks: impl Fn(usize, usize) -> FeedMask) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let epoch = self.epoch;
        let mut total = 0.0;
        let mut p_used = 0;
        for (bi, batch) in self.batches(epoch, data.len()).iter().enumerate() {
            let n = data[batch[0]].y.rows();
            let p = self.schedule.p_for(epoch, n);
            p_used = p_used.max(p);
            let mask = masks(p, n);
            let seeds: Vec<u64> = batch.iter().map(|&i| self.h0_seed(epoch, i)).collect();
            let (g, loss, vars) = batch_graph(&self.model, data, batch, &mask, &seeds, self.config.detach, true)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    batch: bi,
                    what: format!("loss is {value}"),
                });
            }
            let grads = g.backward(loss)?;
            let mut flat: Vec<Tensor> = vars
                .iter()
                .zip(self.model.params.tensors())
                .map(|(&v, t)| grads.get_or_zeros(v, t))
                .collect();
            if let Some(max) = self.config.clip_norm {
                clip_global_norm(&mut flat, max);
            }
            self.optimizer.step(&mut self.model.params, &flat).map_err(|e| Error::Numeric {
                epoch,
                batch: bi,
                what: format!("{e}"),
            })?;
            total += value * batch.len() as f64;
        }
        let per_seq = total / data.len() as f64;
        let n_elem: usize = data.iter().map(|d| d.y.len()).sum::<usize>() / data.len();
        let record = EpochRecord {
            epoch,
            p: p_used,
            loss: per_seq,
            loss_per_elem: per_seq / n_elem as f64,
            seconds: 0.0,
        };
        self.epoch += 1;
        self.log.push(record.clone());
        Ok(record)
    }

    /// Teacher-forced ℓ1 per element over `data`, without updating weights.
    pub fn teacher_forced_loss(&self, data: &[TrainPair]) -> Result<f64> {
        evaluate_loss(&self.model, data, self.config.batch_size, self.config.seed, |_, n| {
            build_feed_mask(n, 0, 1)
        })
    }
}

/// Mean per-element ℓ1 under the given masks; sequences are processed in
/// order with h₀ seeds derived from `seed`.
pub fn evaluate_loss(
    model: &Model,
    data: &[TrainPair],
    batch_size: usize,
    seed: u64,
    masks: impl Fn(usize, usize) -> FeedMask,
) -> Result<f64> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::invalid("evaluate_loss: empty data or batch"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    let mut elems = 0usize;
    for batch in idx.chunks(batch_size) {
        let n = data[batch[0]].y.rows();
        let seeds: Vec<u64> = batch.iter().map(|&i| derive_seed(seed, &[stream::H0, u64::MAX, i as u64])).collect();
        let (g, loss, _) = batch_graph(model, data, batch, &masks(0, n), &seeds, false, false)?;
        total += g.value(loss).data()[0] * batch.len() as f64;
        elems += batch.len() * n * model.config.decoder.d_y;
    }
    Ok(total / elems as f64)
}
