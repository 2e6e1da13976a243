//! Encoder and decoder parameters bundled with the normalization statistics
//! needed to map between raw clips and model space.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Clip, PoseNormalizer};
use crate::decoder::{self, DecoderConfig};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

/// Per-channel standardization of music features. Constant channels keep a
/// unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNormalizer {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for t in seqs {
            let w = t.cols();
            if sum.is_empty() {
                sum = vec![0.0; w];
                sq = vec![0.0; w];
            } else if sum.len() != w {
                return Err(Error::invalid("feature widths differ between clips"));
            }
            for r in 0..t.rows() {
                for (c, &v) in t.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += t.rows();
        }
        if count == 0 {
            return Err(Error::invalid("cannot fit feature statistics on no frames"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                let sd = libm::sqrt(var);
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape("feature normalizer", &[x.rows(), self.mean.len()], x.shape()));
        }
        let mut out = x.clone();
        let w = self.mean.len();
        for row in out.data_mut().chunks_mut(w) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }
}

/// A music/pose pair in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub x: Tensor,
    pub y: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Begin-of-pose input, in normalized pose space.
    pub bop: Vec<f64>,
    pub pose_norm: PoseNormalizer,
    pub feature_norm: FeatureNormalizer,
}

impl Model {
    /// Fresh weights drawn from `seed`; identity normalizers and a zero BOP.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let mut params = ParamStore::new();
        encoder::init_params(&config.encoder, &mut params, &mut rng)?;
        decoder::init_params(&config.decoder, config.encoder.d_z, &mut params, &mut rng)?;
        Ok(Self {
            bop: vec![0.0; config.decoder.d_y],
            feature_norm: FeatureNormalizer::identity(config.encoder.d_x),
            pose_norm: PoseNormalizer::default(),
            config,
            params,
        })
    }

    /// Fits both normalizers on `clips` and sets the BOP to their mean
    /// normalized pose.
    pub fn fit_normalization(&mut self, clips: &[&Clip]) -> Result<()> {
        self.pose_norm = PoseNormalizer::fit(clips.iter().map(|c| &c.pose))?;
        self.feature_norm = FeatureNormalizer::fit(clips.iter().map(|c| &c.music.frames))?;
        let d_y = self.config.decoder.d_y;
        let mut mean = vec![0.0; d_y];
        let mut count = 0usize;
        for c in clips {
            let y = self.pose_norm.apply(&c.pose.frames);
            for r in 0..y.rows() {
                for (m, v) in mean.iter_mut().zip(y.row(r)) {
                    *m += v;
                }
            }
            count += y.rows();
        }
        self.bop = mean.into_iter().map(|m| m / count as f64).collect();
        Ok(())
    }

    pub fn prepare(&self, clip: &Clip) -> Result<TrainPair> {
        if clip.music.len() != clip.pose.len() {
            return Err(Error::invalid("music and pose lengths differ"));
        }
        Ok(TrainPair {
            x: self.feature_norm.apply(&clip.music.frames)?,
            y: self.pose_norm.apply(&clip.pose.frames),
        })
    }

    /// Free-running generation in normalized pose space, one seed per
    /// sequence. All feature matrices must have the same length.
    pub fn generate_normalized(&self, music: &[&Tensor], seeds: &[u64]) -> Result<Vec<Tensor>> {
        let mut zs = Vec::with_capacity(music.len());
        for x in music {
            if x.cols() != self.config.encoder.d_x {
                return Err(Error::shape("generate", &[x.rows(), self.config.encoder.d_x], x.shape()));
            }
            let xn = self.feature_norm.apply(x)?;
            zs.push(encoder::encode_values(&self.config.encoder, &self.params, &xn)?);
        }
        decoder::generate_batch(&self.config.decoder, &self.params, &zs, &self.bop, seeds)
    }

    /// Raw music features in, raw pose coordinates out.
    pub fn generate(&self, music: &Tensor, seed: u64) -> Result<Tensor> {
        let y = self.generate_normalized(&[music], &[seed])?.remove(0);
        Ok(self.pose_norm.invert(&y))
    }
}
