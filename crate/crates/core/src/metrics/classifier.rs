//! Dance style classifier, also the feature extractor behind FID, diversity
//! and multimodality.
//!
//! Each frame `[y_t; y_t − y_{t−1}]` is standardized and embedded with a
//! ReLU layer; the embeddings are mean-pooled over time and passed through a
//! ReLU hidden layer whose activations are the features, then a linear head
//! over the styles.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::PoseNormalizer;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::FeatureNormalizer;
use crate::params::{Bound, ParamStore};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub embed: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            embed: 32,
            hidden: 128,
            epochs: 200,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleClassifier {
    pub config: ClassifierConfig,
    pub classes: usize,
    pub params: ParamStore,
    pub pose_norm: PoseNormalizer,
    pub frame_norm: FeatureNormalizer,
}

/// Raw frame inputs: each pose next to its velocity (zero at frame 0).
fn frame_inputs(pose_norm: &PoseNormalizer, poses: &Tensor) -> Tensor {
    let y = pose_norm.apply(poses);
    let (n, d) = (y.rows(), y.cols());
    let mut out = Tensor::zeros(&[n, 2 * d]);
    for t in 0..n {
        let row = out.row_mut(t);
        row[..d].copy_from_slice(y.row(t));
        if t > 0 {
            for c in 0..d {
                row[d + c] = y.get(t, c) - y.get(t - 1, c);
            }
        }
    }
    out
}

struct Vars {
    w_embed: Var,
    b_embed: Var,
    w_hidden: Var,
    b_hidden: Var,
    w_out: Var,
    b_out: Var,
}

impl Vars {
    fn resolve(b: &Bound) -> Result<Self> {
        Ok(Self {
            w_embed: b.var("style.embed")?,
            b_embed: b.var("style.embed_bias")?,
            w_hidden: b.var("style.hidden")?,
            b_hidden: b.var("style.hidden_bias")?,
            w_out: b.var("style.out")?,
            b_out: b.var("style.out_bias")?,
        })
    }
}

/// Block-averaging matrix pooling each sequence's rows.
fn pool_matrix(lengths: &[usize]) -> Tensor {
    let total: usize = lengths.iter().sum();
    let mut p = Tensor::zeros(&[lengths.len(), total]);
    let mut start = 0;
    for (i, &n) in lengths.iter().enumerate() {
        for c in start..start + n {
            p.set(i, c, 1.0 / n as f64);
        }
        start += n;
    }
    p
}

/// Returns `(hidden features, logits)` for a stack of standardized frames.
fn forward(g: &mut Graph, v: &Vars, frames: Var, lengths: &[usize]) -> Result<(Var, Var)> {
    let total: usize = lengths.iter().sum();
    let b = lengths.len();
    let e = g.matmul(frames, v.w_embed)?;
    let eb = g.tile_rows(v.b_embed, total)?;
    let e = g.add(e, eb)?;
    let e = g.relu(e);
    let pool = g.constant(pool_matrix(lengths));
    let pooled = g.matmul(pool, e)?;
    let h = g.matmul(pooled, v.w_hidden)?;
    let hb = g.tile_rows(v.b_hidden, b)?;
    let h = g.add(h, hb)?;
    let h = g.relu(h);
    let o = g.matmul(h, v.w_out)?;
    let ob = g.tile_rows(v.b_out, b)?;
    let logits = g.add(o, ob)?;
    Ok((h, logits))
}

fn stack(frames: &[Tensor]) -> Tensor {
    let cols = frames[0].cols();
    let mut data = Vec::with_capacity(frames.iter().map(Tensor::len).sum());
    for f in frames {
        data.extend_from_slice(f.data());
    }
    Tensor::matrix(data.len() / cols, cols, data)
}

impl StyleClassifier {
    /// Full-batch cross-entropy training with Adam.
    pub fn train(poses: &[&Tensor], labels: &[usize], config: &ClassifierConfig, seed: u64) -> Result<Self> {
        if poses.is_empty() || poses.len() != labels.len() {
            return Err(Error::invalid("classifier: need one label per sequence"));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let distinct = (0..classes).filter(|c| labels.contains(c)).count();
        if distinct < 2 {
            return Err(Error::invalid("classifier: need at least two styles"));
        }
        if config.embed == 0 || config.hidden == 0 || config.epochs == 0 || !(config.lr > 0.0) {
            return Err(Error::invalid("classifier: embed, hidden, epochs and lr must be positive"));
        }
        let seqs: Vec<crate::data::PoseSequence> = poses
            .iter()
            .map(|p| crate::data::PoseSequence::new((*p).clone(), 0.0))
            .collect::<Result<_>>()?;
        let pose_norm = PoseNormalizer::fit(seqs.iter())?;
        let raw: Vec<Tensor> = poses.iter().map(|p| frame_inputs(&pose_norm, p)).collect();
        let frame_norm = FeatureNormalizer::fit(raw.iter())?;
        let inputs: Vec<Tensor> = raw.iter().map(|r| frame_norm.apply(r)).collect::<Result<_>>()?;
        let lengths: Vec<usize> = inputs.iter().map(Tensor::rows).collect();
        let x = stack(&inputs);
        let d_in = x.cols();

        let mut rng = rng_for(seed, &[stream::CLASSIFIER]);
        let glorot = |a: usize, b: usize| libm::sqrt(2.0 / (a + b) as f64);
        let mut params = ParamStore::new();
        params.insert("style.embed", Tensor::randn(&[d_in, config.embed], glorot(d_in, config.embed), &mut rng))?;
        params.insert("style.embed_bias", Tensor::zeros(&[1, config.embed]))?;
        params.insert(
            "style.hidden",
            Tensor::randn(&[config.embed, config.hidden], glorot(config.embed, config.hidden), &mut rng),
        )?;
        params.insert("style.hidden_bias", Tensor::zeros(&[1, config.hidden]))?;
        params.insert("style.out", Tensor::randn(&[config.hidden, classes], glorot(config.hidden, classes), &mut rng))?;
        params.insert("style.out_bias", Tensor::zeros(&[1, classes]))?;

        let mut onehot = Tensor::zeros(&[labels.len(), classes]);
        for (i, &l) in labels.iter().enumerate() {
            onehot.set(i, l, -1.0 / labels.len() as f64);
        }
        let mut adam = AdamState::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &params,
        );
        for _ in 0..config.epochs {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let v = Vars::resolve(&bound)?;
            let xv = g.constant(x.clone());
            let (_, logits) = forward(&mut g, &v, xv, &lengths)?;
            let logp = g.log_softmax(logits);
            let target = g.constant(onehot.clone());
            let picked = g.mul(logp, target)?;
            let loss = g.sum(picked);
            let grads = g.backward(loss)?;
            let flat: Vec<Tensor> = bound
                .vars()
                .iter()
                .zip(params.tensors())
                .map(|(&v, t)| grads.get_or_zeros(v, t))
                .collect();
            adam.step(&mut params, &flat)?;
        }
        Ok(Self {
            config: config.clone(),
            classes,
            params,
            pose_norm,
            frame_norm,
        })
    }

    fn run(&self, poses: &[&Tensor]) -> Result<(Tensor, Tensor)> {
        if poses.is_empty() {
            return Ok((Tensor::zeros(&[0, self.config.hidden]), Tensor::zeros(&[0, self.classes])));
        }
        let inputs: Vec<Tensor> = poses
            .iter()
            .map(|p| self.frame_norm.apply(&frame_inputs(&self.pose_norm, p)))
            .collect::<Result<_>>()?;
        let lengths: Vec<usize> = inputs.iter().map(Tensor::rows).collect();
        if lengths.contains(&0) {
            return Err(Error::invalid("classifier: empty pose sequence"));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let v = Vars::resolve(&bound)?;
        let xv = g.constant(stack(&inputs));
        let (h, logits) = forward(&mut g, &v, xv, &lengths)?;
        Ok((g.value(h).clone(), g.value(logits).clone()))
    }

    /// Hidden-layer activations, one `hidden`-wide vector per sequence.
    pub fn features(&self, poses: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let (h, _) = self.run(poses)?;
        Ok((0..h.rows()).map(|i| h.row(i).to_vec()).collect())
    }

    pub fn extract_features(&self, poses: &Tensor) -> Result<Vec<f64>> {
        Ok(self.features(&[poses])?.remove(0))
    }

    pub fn predict(&self, poses: &[&Tensor]) -> Result<Vec<usize>> {
        let (_, logits) = self.run(poses)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, poses: &[&Tensor], labels: &[usize]) -> Result<f64> {
        if poses.len() != labels.len() || poses.is_empty() {
            return Err(Error::invalid("accuracy: need one label per sequence"));
        }
        let pred = self.predict(poses)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Convenience for callers holding owned tensors.
pub fn refs(v: &[Tensor]) -> Vec<&Tensor> {
    v.iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_averages_blocks() {
        let p = pool_matrix(&[2, 1]);
        assert_eq!(p.data(), &[0.5, 0.5, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn velocity_channel() {
        let mut y = Tensor::zeros(&[2, 2]);
        y.set(1, 0, 3.0);
        let f = frame_inputs(&PoseNormalizer::default(), &y);
        assert_eq!(f.row(1), &[3.0, 0.0, 3.0, 0.0]);
        assert_eq!(f.row(0), &[0.0; 4]);
    }
}
