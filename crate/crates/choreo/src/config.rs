//! Run configuration: one JSON document with a section per stage, plus
//! `section.key=value` overrides from the command line.

use std::path::Path;

use choreo_core::curriculum::CurriculumSchedule;
use choreo_core::decoder::DecoderConfig;
use choreo_core::encoder::EncoderConfig;
use choreo_core::metrics::MetricsConfig;
use choreo_core::model::ModelConfig;
use choreo_core::synth::SynthSpec;
use choreo_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};
use crate::io::read_json;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthSpec,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub curriculum: CurriculumSchedule,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    /// Reads `path` if given, otherwise starts from the defaults, then
    /// applies each override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        for o in overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Applies `section.key=value`. The value is read as JSON when it parses
    /// and as a bare string otherwise, so `curriculum.kind=linear` works.
    /// Keys must already exist; nested sections use more dots.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let usage = |msg: String| CliError::Usage(format!("--set {assignment}: {msg}"));
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| usage("expected section.key=value".into()))?;
        let keys: Vec<&str> = path.split('.').collect();
        if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
            return Err(usage("expected section.key=value".into()));
        }
        let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

        let mut doc = serde_json::to_value(&*self).map_err(|e| usage(e.to_string()))?;
        let mut slot = &mut doc;
        for k in &keys {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(*k))
                .ok_or_else(|| usage(format!("unknown key `{k}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| usage(e.to_string()))?;
        Ok(())
    }
}
