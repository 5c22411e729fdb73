// SPDX-License-Identifier: MIT OR Apache-2.0

//! Projection-site hook engine.
//!
//! Every projection output in the backbone is passed through [`AttnHub::dispatch`]
//! before attention. The hub folds the tensor through its attached ops in
//! attachment order and keeps per-site firing counts. The hub itself applies no
//! gating policy: each op decides through [`AttnOp::active`] whether a given
//! `(layer, kind, step)` concerns it.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::TensorF;

/// The six projections of a joint-attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProjKind {
    ImgQ,
    ImgK,
    ImgV,
    TxtQ,
    TxtK,
    TxtV,
}

impl ProjKind {
    pub const ALL: [ProjKind; 6] = [
        ProjKind::ImgQ,
        ProjKind::ImgK,
        ProjKind::ImgV,
        ProjKind::TxtQ,
        ProjKind::TxtK,
        ProjKind::TxtV,
    ];

    pub const IMAGE_KV: [ProjKind; 2] = [ProjKind::ImgK, ProjKind::ImgV];
    pub const TEXT_KV: [ProjKind; 2] = [ProjKind::TxtK, ProjKind::TxtV];

    pub fn is_query(self) -> bool {
        matches!(self, ProjKind::ImgQ | ProjKind::TxtQ)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProjKind::ImgQ => "img_q",
            ProjKind::ImgK => "img_k",
            ProjKind::ImgV => "img_v",
            ProjKind::TxtQ => "txt_q",
            ProjKind::TxtK => "txt_k",
            ProjKind::TxtV => "txt_v",
        }
    }
}

impl fmt::Display for ProjKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProjKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::parse(s, "unknown projection kind"))
    }
}

/// One hookable projection: `(layer, kind)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProjSite {
    pub layer: usize,
    pub kind: ProjKind,
}

impl ProjSite {
    pub fn new(layer: usize, kind: ProjKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for ProjSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind)
    }
}

/// Half-open layer interval times half-open step interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Band {
    pub layer_lo: usize,
    pub layer_hi: usize,
    pub step_lo: usize,
    pub step_hi: usize,
}

impl Band {
    pub fn new(layers: std::ops::Range<usize>, steps: std::ops::Range<usize>) -> Self {
        Self {
            layer_lo: layers.start,
            layer_hi: layers.end,
            step_lo: steps.start,
            step_hi: steps.end,
        }
    }

    /// Checks `0 <= lo <= hi <= limit` on both axes.
    pub fn validate(&self, num_layers: usize, steps: usize) -> Result<()> {
        if self.layer_lo > self.layer_hi || self.layer_hi > num_layers {
            return Err(Error::Config(format!(
                "layer band {}-{} invalid for {num_layers} layers",
                self.layer_lo, self.layer_hi
            )));
        }
        if self.step_lo > self.step_hi || self.step_hi > steps {
            return Err(Error::Config(format!(
                "step band {}-{} invalid for {steps} steps",
                self.step_lo, self.step_hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, layer: usize, step: usize) -> bool {
        (self.layer_lo..self.layer_hi).contains(&layer) && (self.step_lo..self.step_hi).contains(&step)
    }

    pub fn is_empty(&self) -> bool {
        self.layer_lo == self.layer_hi || self.step_lo == self.step_hi
    }
}

/// Which half of a classifier-free-guidance step is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    Cond,
    Uncond,
}

impl Branch {
    pub fn index(self) -> usize {
        match self {
            Branch::Cond => 0,
            Branch::Uncond => 1,
        }
    }
}

/// Everything an op sees about the current dispatch besides the tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookCtx {
    pub site: ProjSite,
    pub step: usize,
    pub branch: Branch,
}

/// A training-free transform attached to an [`AttnHub`].
pub trait AttnOp: Send {
    fn name(&self) -> String;

    /// Projection kinds this op may observe or modify. The hub never calls the
    /// op for any other kind.
    fn kinds(&self) -> &'static [ProjKind];

    /// Band gate; `apply` is only called when this returns true.
    fn active(&self, ctx: &HookCtx) -> bool;

    /// Must return a tensor of the same shape as `x`.
    fn apply(&mut self, ctx: &HookCtx, x: TensorF) -> Result<TensorF>;

    /// Clears per-run caches.
    fn reset(&mut self) {}

    /// Toggled by two-pass ops (record, then replay).
    fn set_record_mode(&mut self, _recording: bool) {}
}

/// Registry of ops plus per-run step counter and firing accounting.
pub struct AttnHub {
    ops: Vec<Box<dyn AttnOp>>,
    current_step: usize,
    branch: Branch,
    in_pass: bool,
    firing_log: BTreeMap<ProjSite, u64>,
    applied_log: BTreeMap<(usize, ProjSite), u64>,
    trace: Option<BTreeMap<(usize, ProjSite), u64>>,
}

impl Default for AttnHub {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for AttnHub {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttnHub")
            .field("ops", &self.op_names())
            .field("current_step", &self.current_step)
            .field("in_pass", &self.in_pass)
            .field("total_firings", &self.total_firings())
            .finish()
    }
}

impl AttnHub {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            current_step: 0,
            branch: Branch::Cond,
            in_pass: false,
            firing_log: BTreeMap::new(),
            applied_log: BTreeMap::new(),
            trace: None,
        }
    }

    /// Hub that also keeps a per-step breakdown of firings.
    pub fn with_trace() -> Self {
        Self {
            trace: Some(BTreeMap::new()),
            ..Self::new()
        }
    }

    pub fn attach(&mut self, op: Box<dyn AttnOp>) -> Result<()> {
        if self.in_pass {
            return Err(Error::Hub(format!("cannot attach `{}` while a run is in progress", op.name())));
        }
        self.ops.push(op);
        Ok(())
    }

    pub fn attach_all(&mut self, ops: impl IntoIterator<Item = Box<dyn AttnOp>>) -> Result<()> {
        for op in ops {
            self.attach(op)?;
        }
        Ok(())
    }

    pub fn op_names(&self) -> Vec<String> {
        self.ops.iter().map(|o| o.name()).collect()
    }

    pub fn op_kinds(&self) -> Vec<&'static [ProjKind]> {
        self.ops.iter().map(|o| o.kinds()).collect()
    }

    /// Starts one sampling pass: step counter back to 0. Logs and op caches are kept.
    pub fn begin_pass(&mut self) -> Result<()> {
        if self.in_pass {
            return Err(Error::Hub("pass already in progress".into()));
        }
        self.in_pass = true;
        self.current_step = 0;
        self.branch = Branch::Cond;
        Ok(())
    }

    pub fn end_pass(&mut self) {
        self.in_pass = false;
    }

    pub fn in_pass(&self) -> bool {
        self.in_pass
    }

    pub fn set_branch(&mut self, branch: Branch) {
        self.branch = branch;
    }

    pub fn current_step(&self) -> usize {
        self.current_step
    }

    pub fn advance_step(&mut self) {
        self.current_step += 1;
    }

    /// Step to 0, logs cleared, op caches cleared; the op chain is kept.
    pub fn reset(&mut self) {
        self.current_step = 0;
        self.branch = Branch::Cond;
        self.in_pass = false;
        self.firing_log.clear();
        self.applied_log.clear();
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
        for op in &mut self.ops {
            op.reset();
        }
    }

    pub fn set_record_mode(&mut self, recording: bool) {
        for op in &mut self.ops {
            op.set_record_mode(recording);
        }
    }

    /// Folds `x` through every interested, active op.
    pub fn dispatch(&mut self, site: ProjSite, x: TensorF) -> Result<TensorF> {
        let ctx = HookCtx {
            site,
            step: self.current_step,
            branch: self.branch,
        };
        let mut running = x;
        for (idx, op) in self.ops.iter_mut().enumerate() {
            if !op.kinds().contains(&site.kind) || !op.active(&ctx) {
                continue;
            }
            let before = running.shape();
            let out = op.apply(&ctx, running)?;
            if out.shape() != before {
                return Err(Error::ShapeChanged {
                    op: op.name(),
                    site,
                    before,
                    after: out.shape(),
                });
            }
            *self.applied_log.entry((idx, site)).or_default() += 1;
            running = out;
        }
        *self.firing_log.entry(site).or_default() += 1;
        if let Some(t) = self.trace.as_mut() {
            *t.entry((ctx.step, site)).or_default() += 1;
        }
        Ok(running)
    }

    pub fn firing_log(&self) -> &BTreeMap<ProjSite, u64> {
        &self.firing_log
    }

    pub fn fired(&self, site: ProjSite) -> u64 {
        self.firing_log.get(&site).copied().unwrap_or(0)
    }

    pub fn total_firings(&self) -> u64 {
        self.firing_log.values().sum()
    }

    /// Per-site count of calls where op `op_index` was active and applied.
    pub fn applied_log(&self, op_index: usize) -> BTreeMap<ProjSite, u64> {
        self.applied_log
            .iter()
            .filter(|((i, _), _)| *i == op_index)
            .map(|((_, s), n)| (*s, *n))
            .collect()
    }

    pub fn total_applied(&self) -> u64 {
        self.applied_log.values().sum()
    }

    /// `(step, site, fired)` rows when tracing is on.
    pub fn trace_rows(&self) -> Option<Vec<(usize, ProjSite, u64)>> {
        self.trace
            .as_ref()
            .map(|t| t.iter().map(|((step, site), n)| (*step, *site, *n)).collect())
    }

    /// Writes `step,layer,kind,fired` lines.
    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<()> {
        let rows = self
            .trace_rows()
            .ok_or_else(|| Error::Hub("tracing is not enabled on this hub".into()))?;
        for (step, site, n) in rows {
            writeln!(w, "{step},{},{},{n}", site.layer, site.kind)?;
        }
        Ok(())
    }
}
