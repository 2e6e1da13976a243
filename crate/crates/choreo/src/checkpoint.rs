//! Checkpoint directories.
//!
//! `manifest.json` lists every parameter with its shape and element offset,
//! together with the run config, normalizers, optimizer step and epoch log.
//! `params.bin` holds the parameters as little-endian f64 in manifest order;
//! `optimizer.bin` holds all first moments followed by all second moments in
//! the same layout.

use std::fs;
use std::path::Path;

use choreo_core::adam::{AdamConfig, AdamState};
use choreo_core::data::PoseNormalizer;
use choreo_core::model::{FeatureNormalizer, Model};
use choreo_core::training::{EpochRecord, Trainer};
use choreo_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{read_json, write_json};

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const OPTIMIZER: &str = "optimizer.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogEntry {
    pub epoch: usize,
    pub p: usize,
    pub loss: f64,
    pub loss_per_elem: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dtype: String,
    pub epoch: usize,
    pub config: RunConfig,
    pub params: Vec<ParamEntry>,
    pub bop: Vec<f64>,
    pub pose_norm: PoseNormalizer,
    pub feature_norm: FeatureNormalizer,
    pub optimizer: AdamConfig,
    pub optimizer_step: u64,
    /// Wall times are left out so identical runs give identical files.
    pub log: Vec<LogEntry>,
}

/// Everything needed to resume training or to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, config: &RunConfig) -> Self {
        Self {
            config: config.clone(),
            model: t.model.clone(),
            optimizer: t.optimizer.clone(),
            epoch: t.epoch,
            log: t.log.clone(),
        }
    }
}

fn blob(tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensors.iter().map(|t| t.len() * 8).sum());
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(CliError::format(
            path,
            format!("{} bytes, manifest needs {}", bytes.len(), expected * 8),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn save(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut entries = Vec::with_capacity(ck.model.params.len());
    let mut offset = 0;
    for (name, t) in ck.model.params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let manifest = Manifest {
        dtype: "f64".into(),
        epoch: ck.epoch,
        config: ck.config.clone(),
        params: entries,
        bop: ck.model.bop.clone(),
        pose_norm: ck.model.pose_norm,
        feature_norm: ck.model.feature_norm.clone(),
        optimizer: ck.optimizer.config,
        optimizer_step: ck.optimizer.step,
        log: ck
            .log
            .iter()
            .map(|r| LogEntry {
                epoch: r.epoch,
                p: r.p,
                loss: r.loss,
                loss_per_elem: r.loss_per_elem,
            })
            .collect(),
    };
    let params: Vec<&Tensor> = ck.model.params.tensors().iter().collect();
    let moments: Vec<&Tensor> = ck.optimizer.m.iter().chain(&ck.optimizer.v).collect();
    let p = dir.join(PARAMS);
    fs::write(&p, blob(&params)).map_err(|e| CliError::io(&p, e))?;
    let o = dir.join(OPTIMIZER);
    fs::write(&o, blob(&moments)).map_err(|e| CliError::io(&o, e))?;
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let m: Manifest = read_json(&mpath)?;
    if m.dtype != "f64" {
        return Err(CliError::format(&mpath, format!("unsupported dtype `{}`", m.dtype)));
    }
    let mut total = 0;
    for e in &m.params {
        if e.offset != total {
            return Err(CliError::format(&mpath, format!("parameter `{}` is not contiguous", e.name)));
        }
        total += e.shape.iter().product::<usize>();
    }
    let values = read_blob(&dir.join(PARAMS), total)?;
    let moments = read_blob(&dir.join(OPTIMIZER), 2 * total)?;

    let tensor_at = |data: &[f64], e: &ParamEntry, base: usize| -> Result<Tensor> {
        let len: usize = e.shape.iter().product();
        Ok(Tensor::new(e.shape.clone(), data[base + e.offset..base + e.offset + len].to_vec())?)
    };
    let mut params = ParamStore::new();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for e in &m.params {
        params.insert(e.name.clone(), tensor_at(&values, e, 0)?)?;
        first.push(tensor_at(&moments, e, 0)?);
        second.push(tensor_at(&moments, e, total)?);
    }

    let model_cfg = m.config.model();
    model_cfg.validate()?;
    // the config must describe exactly the stored parameters
    let reference = Model::init(model_cfg.clone(), 0)?;
    if reference.params.names() != params.names()
        || reference.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(CliError::format(&mpath, "parameters do not match the stored model config"));
    }
    if m.bop.len() != model_cfg.decoder.d_y || m.feature_norm.mean.len() != model_cfg.encoder.d_x {
        return Err(CliError::format(&mpath, "normalizer widths do not match the model config"));
    }

    Ok(Checkpoint {
        model: Model {
            config: model_cfg,
            params,
            bop: m.bop,
            pose_norm: m.pose_norm,
            feature_norm: m.feature_norm,
        },
        optimizer: AdamState {
            config: m.optimizer,
            step: m.optimizer_step,
            m: first,
            v: second,
        },
        epoch: m.epoch,
        log: m
            .log
            .into_iter()
            .map(|r| EpochRecord {
                epoch: r.epoch,
                p: r.p,
                loss: r.loss,
                loss_per_elem: r.loss_per_elem,
                seconds: 0.0,
            })
            .collect(),
        config: m.config,
    })
}
