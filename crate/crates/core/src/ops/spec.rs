// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative op descriptions and their textual form.
//!
//! ```text
//! baseline
//! kvinject:alpha=0.3,layers=frac:0.5-0.75,steps=0-7
//! kvscale:half=src,factor=2,layers=all,steps=all
//! textscale:factor=3,layers=0-12,steps=0-28
//! masactrl:layers=6-9,steps=0-28,neutral=a photo
//! compose(kvinject:alpha=0.5;textscale:factor=1.5)
//! ```
//!
//! `layers` and `steps` default to `all`. Intervals are half-open.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{KvInjectOp, KvScaleOp, MasaCtrlOp, TextScaleOp};
use crate::error::{Error, Result};
use crate::hook::{AttnOp, Band};
use crate::mmdit::ModelConfig;

/// Layer interval, possibly expressed as a fraction of model depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpan {
    All,
    Abs(usize, usize),
    Frac(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepSpan {
    All,
    Abs(usize, usize),
}

/// Unresolved band; becomes a [`Band`] once model depth and step count are known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub layers: LayerSpan,
    pub steps: StepSpan,
}

impl BandSpec {
    pub const ALL: BandSpec = BandSpec {
        layers: LayerSpan::All,
        steps: StepSpan::All,
    };

    pub fn layers(lo: usize, hi: usize) -> Self {
        Self {
            layers: LayerSpan::Abs(lo, hi),
            steps: StepSpan::All,
        }
    }

    pub fn frac(lo: f64, hi: f64) -> Self {
        Self {
            layers: LayerSpan::Frac(lo, hi),
            steps: StepSpan::All,
        }
    }

    pub fn with_steps(mut self, lo: usize, hi: usize) -> Self {
        self.steps = StepSpan::Abs(lo, hi);
        self
    }

    pub fn resolve(&self, ctx: &OpContext) -> Result<Band> {
        let layers = match self.layers {
            LayerSpan::All => 0..ctx.num_layers,
            LayerSpan::Abs(lo, hi) => lo..hi,
            LayerSpan::Frac(lo, hi) => {
                if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                    return Err(Error::Config(format!("depth fraction {lo}-{hi} outside [0, 1]")));
                }
                ctx.layers_for_fraction(lo, hi)
            }
        };
        let steps = match self.steps {
            StepSpan::All => 0..ctx.steps,
            StepSpan::Abs(lo, hi) => lo..hi,
        };
        let band = Band::new(layers, steps);
        band.validate(ctx.num_layers, ctx.steps)?;
        Ok(band)
    }
}

/// Model facts needed to turn an [`OpSpec`] into live ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpContext {
    pub num_layers: usize,
    pub steps: usize,
    pub source_start: usize,
}

impl OpContext {
    pub fn new(model: &ModelConfig, steps: usize) -> Self {
        Self {
            num_layers: model.num_layers,
            steps,
            source_start: model.source_start(),
        }
    }

    fn layers_for_fraction(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        ModelConfig {
            num_layers: self.num_layers,
            ..ModelConfig::default()
        }
        .layers_for_fraction(lo, hi)
    }
}

/// Which half of the image stream an op targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Half {
    Source,
    Noise,
}

impl Half {
    fn as_str(self) -> &'static str {
        match self {
            Half::Source => "src",
            Half::Noise => "noi",
        }
    }
}

/// One attention manipulation, or none, or an ordered chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OpSpec {
    Baseline,
    KvInject {
        alpha: f32,
        band: BandSpec,
    },
    SimpleKvScale {
        half: Half,
        factor: f32,
        band: BandSpec,
    },
    TextScale {
        factor: f32,
        band: BandSpec,
    },
    MasaCtrl {
        band: BandSpec,
        neutral_prompt: String,
        /// Replace the whole image stream instead of the noise half only.
        full_stream: bool,
    },
    Compose(Vec<OpSpec>),
}

impl OpSpec {
    pub fn kv_inject(alpha: f32, band: BandSpec) -> Self {
        OpSpec::KvInject { alpha, band }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OpSpec::Baseline => Ok(()),
            OpSpec::KvInject { alpha, .. } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::parse(format!("alpha={alpha}"), "alpha must lie in [0, 1]"));
                }
                Ok(())
            }
            OpSpec::SimpleKvScale { factor, .. } | OpSpec::TextScale { factor, .. } => {
                if !(factor.is_finite() && *factor >= 0.0) {
                    return Err(Error::parse(format!("factor={factor}"), "factor must be finite and >= 0"));
                }
                Ok(())
            }
            OpSpec::MasaCtrl { neutral_prompt, .. } => {
                if neutral_prompt.contains([',', ';', '(', ')']) {
                    return Err(Error::parse(neutral_prompt.clone(), "neutral prompt may not contain , ; ( )"));
                }
                Ok(())
            }
            OpSpec::Compose(ops) => {
                if ops.is_empty() {
                    return Err(Error::parse("compose()", "compose needs at least one op"));
                }
                for op in ops {
                    if matches!(op, OpSpec::Compose(_)) {
                        return Err(Error::parse(op.to_string(), "compose may not be nested"));
                    }
                    op.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Flattened list of leaf ops, in dispatch order.
    pub fn leaves(&self) -> Vec<&OpSpec> {
        match self {
            OpSpec::Compose(ops) => ops.iter().collect(),
            other => vec![other],
        }
    }

    /// Settings of the first MasaCtrl leaf, if any. Such specs need a record pass.
    pub fn masactrl(&self) -> Option<(&BandSpec, &str)> {
        self.leaves().into_iter().find_map(|op| match op {
            OpSpec::MasaCtrl {
                band, neutral_prompt, ..
            } => Some((band, neutral_prompt.as_str())),
            _ => None,
        })
    }

    pub fn is_two_pass(&self) -> bool {
        self.masactrl().is_some()
    }

    /// Live hook ops in chain order. `Baseline` yields none.
    pub fn instantiate(&self, ctx: &OpContext) -> Result<Vec<Box<dyn AttnOp>>> {
        self.validate()?;
        let mut out: Vec<Box<dyn AttnOp>> = Vec::new();
        for leaf in self.leaves() {
            match leaf {
                OpSpec::Baseline => {}
                OpSpec::KvInject { alpha, band } => {
                    out.push(Box::new(KvInjectOp::new(*alpha, band.resolve(ctx)?, ctx.source_start)));
                }
                OpSpec::SimpleKvScale { half, factor, band } => {
                    out.push(Box::new(KvScaleOp::new(*half, *factor, band.resolve(ctx)?, ctx.source_start)));
                }
                OpSpec::TextScale { factor, band } => {
                    out.push(Box::new(TextScaleOp::new(*factor, band.resolve(ctx)?)));
                }
                OpSpec::MasaCtrl { band, full_stream, .. } => {
                    out.push(Box::new(MasaCtrlOp::new(band.resolve(ctx)?, ctx.source_start, *full_stream)));
                }
                OpSpec::Compose(_) => unreachable!("validated: no nested compose"),
            }
        }
        Ok(out)
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

impl fmt::Display for LayerSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpan::All => f.write_str("all"),
            LayerSpan::Abs(lo, hi) => write!(f, "{lo}-{hi}"),
            LayerSpan::Frac(lo, hi) => write!(f, "frac:{}-{}", fmt_num(*lo), fmt_num(*hi)),
        }
    }
}

impl fmt::Display for StepSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSpan::All => f.write_str("all"),
            StepSpan::Abs(lo, hi) => write!(f, "{lo}-{hi}"),
        }
    }
}

impl fmt::Display for OpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpSpec::Baseline => f.write_str("baseline"),
            OpSpec::KvInject { alpha, band } => {
                write!(f, "kvinject:alpha={alpha},layers={},steps={}", band.layers, band.steps)
            }
            OpSpec::SimpleKvScale { half, factor, band } => write!(
                f,
                "kvscale:half={},factor={factor},layers={},steps={}",
                half.as_str(),
                band.layers,
                band.steps
            ),
            OpSpec::TextScale { factor, band } => {
                write!(f, "textscale:factor={factor},layers={},steps={}", band.layers, band.steps)
            }
            OpSpec::MasaCtrl {
                band,
                neutral_prompt,
                full_stream,
            } => {
                write!(f, "masactrl:layers={},steps={}", band.layers, band.steps)?;
                if *full_stream {
                    f.write_str(",full=true")?;
                }
                write!(f, ",neutral={neutral_prompt}")
            }
            OpSpec::Compose(ops) => {
                f.write_str("compose(")?;
                for (i, op) in ops.iter().enumerate() {
                    if i > 0 {
                        f.write_str(";")?;
                    }
                    write!(f, "{op}")?;
                }
                f.write_str(")")
            }
        }
    }
}

fn parse_range(token: &str, value: &str) -> Result<(usize, usize)> {
    let (lo, hi) = value
        .split_once('-')
        .ok_or_else(|| Error::parse(token, "expected <lo>-<hi>"))?;
    let lo = lo.trim().parse().map_err(|_| Error::parse(token, "bad integer"))?;
    let hi = hi.trim().parse().map_err(|_| Error::parse(token, "bad integer"))?;
    if lo > hi {
        return Err(Error::parse(token, "lo must not exceed hi"));
    }
    Ok((lo, hi))
}

fn parse_layers(token: &str, value: &str) -> Result<LayerSpan> {
    if value == "all" {
        return Ok(LayerSpan::All);
    }
    if let Some(frac) = value.strip_prefix("frac:") {
        let (lo, hi) = frac
            .split_once('-')
            .ok_or_else(|| Error::parse(token, "expected frac:<lo>-<hi>"))?;
        let lo: f64 = lo.trim().parse().map_err(|_| Error::parse(token, "bad fraction"))?;
        let hi: f64 = hi.trim().parse().map_err(|_| Error::parse(token, "bad fraction"))?;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::parse(token, "fractions must satisfy 0 <= lo <= hi <= 1"));
        }
        return Ok(LayerSpan::Frac(lo, hi));
    }
    let (lo, hi) = parse_range(token, value)?;
    Ok(LayerSpan::Abs(lo, hi))
}

fn parse_steps(token: &str, value: &str) -> Result<StepSpan> {
    if value == "all" {
        return Ok(StepSpan::All);
    }
    let (lo, hi) = parse_range(token, value)?;
    Ok(StepSpan::Abs(lo, hi))
}

fn parse_real(token: &str, value: &str) -> Result<f32> {
    let v: f32 = value.trim().parse().map_err(|_| Error::parse(token, "bad number"))?;
    if !v.is_finite() {
        return Err(Error::parse(token, "number must be finite"));
    }
    Ok(v)
}

struct Fields<'a> {
    pairs: Vec<(&'a str, &'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn parse(body: &'a str, allowed: &[&str]) -> Result<Self> {
        let mut pairs: Vec<(&str, &str, &str)> = Vec::new();
        for token in body.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| Error::parse(token, "expected key=value"))?;
            let k = k.trim();
            if !allowed.contains(&k) {
                return Err(Error::parse(token, format!("unknown key `{k}`")));
            }
            if pairs.iter().any(|(pk, _, _)| *pk == k) {
                return Err(Error::parse(token, format!("duplicate key `{k}`")));
            }
            pairs.push((k, v.trim(), token));
        }
        Ok(Self { pairs })
    }

    fn get(&self, key: &str) -> Option<(&'a str, &'a str)> {
        self.pairs.iter().find(|(k, _, _)| *k == key).map(|(_, v, t)| (*v, *t))
    }

    fn required(&self, key: &str, whole: &str) -> Result<(&'a str, &'a str)> {
        self.get(key)
            .ok_or_else(|| Error::parse(whole, format!("missing required key `{key}`")))
    }

    fn band(&self) -> Result<BandSpec> {
        let layers = match self.get("layers") {
            Some((v, t)) => parse_layers(t, v)?,
            None => LayerSpan::All,
        };
        let steps = match self.get("steps") {
            Some((v, t)) => parse_steps(t, v)?,
            None => StepSpan::All,
        };
        Ok(BandSpec { layers, steps })
    }
}

fn parse_leaf(text: &str) -> Result<OpSpec> {
    let text = text.trim();
    if text == "baseline" {
        return Ok(OpSpec::Baseline);
    }
    let (head, body) = text
        .split_once(':')
        .ok_or_else(|| Error::parse(text, "expected <op>:<key=value,...> or `baseline`"))?;
    let spec = match head.trim() {
        "kvinject" => {
            let f = Fields::parse(body, &["alpha", "layers", "steps"])?;
            let (v, t) = f.required("alpha", text)?;
            let alpha = parse_real(t, v)?;
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::parse(t, "alpha must lie in [0, 1]"));
            }
            OpSpec::KvInject { alpha, band: f.band()? }
        }
        "kvscale" => {
            let f = Fields::parse(body, &["half", "factor", "layers", "steps"])?;
            let (hv, ht) = f.required("half", text)?;
            let half = match hv {
                "src" => Half::Source,
                "noi" => Half::Noise,
                _ => return Err(Error::parse(ht, "half must be `src` or `noi`")),
            };
            let (v, t) = f.required("factor", text)?;
            let factor = parse_real(t, v)?;
            if factor < 0.0 {
                return Err(Error::parse(t, "factor must be >= 0"));
            }
            OpSpec::SimpleKvScale {
                half,
                factor,
                band: f.band()?,
            }
        }
        "textscale" => {
            let f = Fields::parse(body, &["factor", "layers", "steps"])?;
            let (v, t) = f.required("factor", text)?;
            let factor = parse_real(t, v)?;
            if factor < 0.0 {
                return Err(Error::parse(t, "factor must be >= 0"));
            }
            OpSpec::TextScale { factor, band: f.band()? }
        }
        "masactrl" => {
            let f = Fields::parse(body, &["layers", "steps", "neutral", "full"])?;
            let neutral_prompt = f.get("neutral").map_or("", |(v, _)| v).to_string();
            let full_stream = match f.get("full") {
                None => false,
                Some(("true", _)) => true,
                Some(("false", _)) => false,
                Some((_, t)) => return Err(Error::parse(t, "full must be true or false")),
            };
            OpSpec::MasaCtrl {
                band: f.band()?,
                neutral_prompt,
                full_stream,
            }
        }
        other => return Err(Error::parse(other, "unknown op")),
    };
    Ok(spec)
}

impl FromStr for OpSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("compose(") {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| Error::parse(s, "compose is missing its closing `)`"))?;
            if inner.contains("compose(") {
                return Err(Error::parse(inner, "compose may not be nested"));
            }
            let ops = inner
                .split(';')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(parse_leaf)
                .collect::<Result<Vec<_>>>()?;
            let spec = OpSpec::Compose(ops);
            spec.validate()?;
            return Ok(spec);
        }
        let spec = parse_leaf(s)?;
        spec.validate()?;
        Ok(spec)
    }
}
