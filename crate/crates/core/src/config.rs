//! The single run configuration: one section per module, JSON on disk,
//! with dotted-path overrides (`training.max_lr=3e-4`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::bottleneck::BottleneckConfig;
use crate::content::ContentConfig;
use crate::convert::ConvertConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::evalsuite::EvalConfig;
use crate::features::FeaturesConfig;
use crate::model::ModelConfig;
use crate::signal::SignalConfig;
use crate::style::StyleConfig;
use crate::training::TrainConfig;
use crate::vocoder::VocoderConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter initialization.
    pub seed: u64,
    pub signal: SignalConfig,
    pub features: FeaturesConfig,
    pub bottleneck: BottleneckConfig,
    pub style: StyleConfig,
    pub content: ContentConfig,
    pub decoder: DecoderConfig,
    pub vocoder: VocoderConfig,
    pub training: TrainConfig,
    pub convert: ConvertConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// The paper-scale architecture.
    Paper,
    /// Narrow networks for CPU smoke runs.
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::config(format!("unknown preset '{other}' (expected paper or tiny)"))),
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::default(),
            Preset::Tiny => Self {
                style: StyleConfig::tiny(),
                content: ContentConfig::tiny(),
                decoder: DecoderConfig::tiny(),
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.training.validate()?;
        self.convert.validate()?;
        self.augment.specaugment.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            style: self.style.clone(),
            content: self.content.clone(),
            decoder: self.decoder.clone(),
            n_mels: self.signal.n_mels,
            seed: self.seed,
        }
    }

    /// Start from `preset`, merge the file (if any) over it, then apply
    /// overrides in order. Unknown keys anywhere are rejected.
    pub fn load(path: Option<&Path>, preset: Preset, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::preset(preset))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            merge(&mut value, file, "")?;
        }
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None => return Err(Error::config(format!("unknown config key '{p}'"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Set `dotted.key` to `raw`, parsed as JSON when it parses and taken as a
/// string otherwise.
pub fn apply_override(value: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut slot = value;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::config(format!("unknown config key '{key}'")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
