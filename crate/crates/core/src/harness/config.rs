// SPDX-License-Identifier: MIT OR Apache-2.0

//! `key = value` configuration for the model and the sampler.
//!
//! ```text
//! # toy defaults
//! num_layers = 12
//! d_model = 32
//! steps = 28
//! cfg_scale = 4.0
//! ```
//!
//! Missing keys keep their defaults; unknown or repeated keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mmdit::{ModelConfig, SampleConfig};

pub const KEYS: [&str; 10] = [
    "num_layers",
    "d_model",
    "heads",
    "noise_tokens",
    "source_tokens",
    "text_tokens",
    "weight_seed",
    "steps",
    "cfg_scale",
    "negative_prompt",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sample: SampleConfig,
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            let m = &mut cfg.model;
            match k {
                "num_layers" => m.num_layers = num(k, v)?,
                "d_model" => m.d_model = num(k, v)?,
                "heads" => m.heads = num(k, v)?,
                "noise_tokens" => m.noise_tokens = num(k, v)?,
                "source_tokens" => m.source_tokens = num(k, v)?,
                "text_tokens" => m.text_tokens = num(k, v)?,
                "weight_seed" => m.weight_seed = num(k, v)?,
                "steps" => cfg.sample.steps = num(k, v)?,
                "cfg_scale" => cfg.sample.cfg_scale = num(k, v)?,
                "negative_prompt" => cfg.sample.negative_prompt = v.to_string(),
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{k}` (expected one of {})",
                        i + 1,
                        KEYS.join(", ")
                    )))
                }
            }
        }
        cfg.model.validate()?;
        cfg.sample.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::error::read_file(path)?)
    }

    pub fn to_text(&self) -> String {
        let (m, s) = (&self.model, &self.sample);
        let mut out = String::new();
        for (k, v) in [
            ("num_layers", m.num_layers.to_string()),
            ("d_model", m.d_model.to_string()),
            ("heads", m.heads.to_string()),
            ("noise_tokens", m.noise_tokens.to_string()),
            ("source_tokens", m.source_tokens.to_string()),
            ("text_tokens", m.text_tokens.to_string()),
            ("weight_seed", m.weight_seed.to_string()),
            ("steps", s.steps.to_string()),
            ("cfg_scale", s.cfg_scale.to_string()),
            ("negative_prompt", s.negative_prompt.clone()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
