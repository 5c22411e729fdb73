// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training-free attention ops.
//!
//! Each op is a pure tensor kernel plus a thin [`AttnOp`] wrapper that owns its
//! band gate and any per-run state:
//!
//! - [`kv_inject`]: blend the source half of image K/V into the noise half.
//! - [`simple_kv_scale`]: multiply one half of image K/V by a constant.
//! - [`text_scale`]: multiply text-stream K/V by a constant.
//! - [`masactrl_record`] / [`masactrl_inject`]: two-pass record and replay.
//! - [`k_probe`]: cosine between noise-half and source-half keys, observe only.

mod spec;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};

pub use spec::{BandSpec, Half, LayerSpan, OpContext, OpSpec, StepSpan};

use crate::error::{Error, Result};
use crate::hook::{AttnOp, Band, Branch, HookCtx, ProjKind, ProjSite};
use crate::numerics::{cosine, TensorF};

fn is_image_kv(kind: ProjKind) -> bool {
    matches!(kind, ProjKind::ImgK | ProjKind::ImgV)
}

fn check_halves(x: &TensorF, source_start: usize, op: &'static str) -> Result<()> {
    if x.tokens() < 2 * source_start {
        return Err(Error::InvalidInput {
            op,
            msg: format!(
                "token dim {} is smaller than 2 * source_start = {}",
                x.tokens(),
                2 * source_start
            ),
        });
    }
    Ok(())
}

/// Resolved KVInject settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KvInject {
    pub alpha: f32,
    pub band: Band,
}

/// Noise-half `[0, s)` of image K/V becomes `alpha * src + (1 - alpha) * noise`
/// with `src = x[s, 2s)`, inside the band. Everything else is returned untouched.
pub fn kv_inject(site: ProjSite, step: usize, x: TensorF, spec: &KvInject, source_start: usize) -> Result<TensorF> {
    if !is_image_kv(site.kind) {
        return Ok(x);
    }
    check_halves(&x, source_start, "kv_inject")?;
    if !spec.band.contains(site.layer, step) || spec.alpha == 0.0 {
        return Ok(x);
    }
    let alpha = spec.alpha;
    let keep = 1.0 - alpha;
    let mut out = x;
    for b in 0..out.batch() {
        for t in 0..source_start {
            let src: Vec<f32> = out.row(b, source_start + t).to_vec();
            let row = out.row_mut(b, t);
            if alpha == 1.0 {
                row.copy_from_slice(&src);
            } else {
                for (n, s) in row.iter_mut().zip(&src) {
                    *n = alpha * s + keep * *n;
                }
            }
        }
    }
    Ok(out)
}

/// Resolved simple K/V rescale settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimpleKvScale {
    pub half: Half,
    pub factor: f32,
    pub band: Band,
}

/// Multiplies the chosen half of image K/V by `factor` inside the band.
pub fn simple_kv_scale(
    site: ProjSite,
    step: usize,
    x: TensorF,
    spec: &SimpleKvScale,
    source_start: usize,
) -> Result<TensorF> {
    if !is_image_kv(site.kind) {
        return Ok(x);
    }
    check_halves(&x, source_start, "simple_kv_scale")?;
    if !spec.band.contains(site.layer, step) || spec.factor == 1.0 {
        return Ok(x);
    }
    let range = match spec.half {
        Half::Noise => 0..source_start,
        Half::Source => source_start..2 * source_start,
    };
    let mut out = x;
    for b in 0..out.batch() {
        for t in range.clone() {
            for v in out.row_mut(b, t) {
                *v *= spec.factor;
            }
        }
    }
    Ok(out)
}

/// Resolved TextScale settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextScale {
    pub factor: f32,
    pub band: Band,
}

/// Multiplies text-stream K/V by `factor` inside the band.
pub fn text_scale(site: ProjSite, step: usize, x: TensorF, spec: &TextScale) -> TensorF {
    if !matches!(site.kind, ProjKind::TxtK | ProjKind::TxtV) || !spec.band.contains(site.layer, step) {
        return x;
    }
    if spec.factor == 1.0 {
        return x;
    }
    x.scaled(spec.factor)
}

/// Image K/V recorded during a MasaCtrl source pass.
///
/// One entry per `(site, step)`; each entry holds the conditional and the
/// unconditional CFG branch.
#[derive(Debug, Default, Clone)]
pub struct KvCache {
    entries: BTreeMap<(ProjSite, usize), [Option<TensorF>; 2]>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn get(&self, site: ProjSite, step: usize, branch: Branch) -> Option<&TensorF> {
        self.entries.get(&(site, step)).and_then(|e| e[branch.index()].as_ref())
    }

    fn insert(&mut self, ctx: &HookCtx, x: TensorF) -> Result<()> {
        let slot = &mut self.entries.entry((ctx.site, ctx.step)).or_default()[ctx.branch.index()];
        if slot.is_some() {
            return Err(Error::DuplicateRecord {
                site: ctx.site,
                step: ctx.step,
            });
        }
        *slot = Some(x);
        Ok(())
    }
}

/// Stores a copy of `x` under `(site, step, branch)` and returns `x` unchanged.
pub fn masactrl_record(ctx: &HookCtx, x: TensorF, cache: &mut KvCache) -> Result<TensorF> {
    cache.insert(ctx, x.clone())?;
    Ok(x)
}

/// Replaces the noise half of `x` (or all of it with `full_stream`) by the
/// cached tensor for the same `(site, step, branch)`, inside the band.
pub fn masactrl_inject(
    ctx: &HookCtx,
    x: TensorF,
    cache: &KvCache,
    band: &Band,
    source_start: usize,
    full_stream: bool,
) -> Result<TensorF> {
    if !is_image_kv(ctx.site.kind) || !band.contains(ctx.site.layer, ctx.step) {
        return Ok(x);
    }
    let cached = cache.get(ctx.site, ctx.step, ctx.branch).ok_or(Error::MissingCache {
        site: ctx.site,
        step: ctx.step,
    })?;
    if cached.shape() != x.shape() {
        return Err(Error::Shape {
            op: "masactrl_inject",
            lhs: x.shape(),
            rhs: cached.shape(),
        });
    }
    if full_stream {
        return Ok(cached.clone());
    }
    check_halves(&x, source_start, "masactrl_inject")?;
    let mut out = x;
    out.write_tokens(0, &cached.slice_tokens(0, source_start)?)?;
    Ok(out)
}

/// One probe reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSample {
    pub cos_sim: f64,
    /// Set when either half had zero norm; `cos_sim` is then 0.
    pub degenerate: bool,
}

/// Probe readings keyed by `(layer, step)`, in arrival order.
#[derive(Debug, Default, Clone)]
pub struct ProbeLog {
    samples: BTreeMap<(usize, usize), Vec<ProbeSample>>,
}

impl ProbeLog {
    pub fn get(&self, layer: usize, step: usize) -> &[ProbeSample] {
        self.samples.get(&(layer, step)).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &ProbeSample)> {
        self.samples.iter().flat_map(|(k, v)| v.iter().map(move |s| (*k, s)))
    }

    pub fn len(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    /// Mean similarity per layer over all recorded steps.
    pub fn layer_means(&self) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for ((layer, _), s) in self.iter() {
            let e = acc.entry(layer).or_default();
            e.0 += s.cos_sim;
            e.1 += 1;
        }
        acc.into_iter().map(|(l, (sum, n))| (l, sum / n as f64)).collect()
    }

    /// Writes `layer,step,cos_sim,degenerate` rows.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,step,cos_sim,degenerate")?;
        for ((layer, step), s) in self.iter() {
            writeln!(w, "{layer},{step},{:.6},{}", s.cos_sim, s.degenerate)?;
        }
        Ok(())
    }
}

/// Appends `cos(flatten(noise half), flatten(source half))` for `ImgK` sites and
/// returns `x` unchanged.
pub fn k_probe(ctx: &HookCtx, x: TensorF, log: &mut ProbeLog, source_start: usize) -> Result<TensorF> {
    if ctx.site.kind != ProjKind::ImgK {
        return Ok(x);
    }
    check_halves(&x, source_start, "k_probe")?;
    let noise = x.slice_tokens(0, source_start)?;
    let src = x.slice_tokens(source_start, 2 * source_start)?;
    let sample = match cosine(noise.data(), src.data()) {
        Some(c) => ProbeSample {
            cos_sim: c,
            degenerate: false,
        },
        None => ProbeSample {
            cos_sim: 0.0,
            degenerate: true,
        },
    };
    log.samples.entry((ctx.site.layer, ctx.step)).or_default().push(sample);
    Ok(x)
}

// ---------------------------------------------------------------------------
// Hook wrappers
// ---------------------------------------------------------------------------

pub struct KvInjectOp {
    params: KvInject,
    source_start: usize,
}

impl KvInjectOp {
    pub fn new(alpha: f32, band: Band, source_start: usize) -> Self {
        Self {
            params: KvInject { alpha, band },
            source_start,
        }
    }
}

impl AttnOp for KvInjectOp {
    fn name(&self) -> String {
        format!("kvinject(alpha={})", self.params.alpha)
    }

    fn kinds(&self) -> &'static [ProjKind] {
        &ProjKind::IMAGE_KV
    }

    fn active(&self, ctx: &HookCtx) -> bool {
        self.params.band.contains(ctx.site.layer, ctx.step)
    }

    fn apply(&mut self, ctx: &HookCtx, x: TensorF) -> Result<TensorF> {
        kv_inject(ctx.site, ctx.step, x, &self.params, self.source_start)
    }
}

pub struct KvScaleOp {
    params: SimpleKvScale,
    source_start: usize,
}

impl KvScaleOp {
    pub fn new(half: Half, factor: f32, band: Band, source_start: usize) -> Self {
        Self {
            params: SimpleKvScale { half, factor, band },
            source_start,
        }
    }
}

impl AttnOp for KvScaleOp {
    fn name(&self) -> String {
        format!("kvscale({:?},factor={})", self.params.half, self.params.factor)
    }

    fn kinds(&self) -> &'static [ProjKind] {
        &ProjKind::IMAGE_KV
    }

    fn active(&self, ctx: &HookCtx) -> bool {
        self.params.band.contains(ctx.site.layer, ctx.step)
    }

    fn apply(&mut self, ctx: &HookCtx, x: TensorF) -> Result<TensorF> {
        simple_kv_scale(ctx.site, ctx.step, x, &self.params, self.source_start)
    }
}

pub struct TextScaleOp {
    params: TextScale,
}

impl TextScaleOp {
    pub fn new(factor: f32, band: Band) -> Self {
        Self {
            params: TextScale { factor, band },
        }
    }
}

impl AttnOp for TextScaleOp {
    fn name(&self) -> String {
        format!("textscale(factor={})", self.params.factor)
    }

    fn kinds(&self) -> &'static [ProjKind] {
        &ProjKind::TEXT_KV
    }

    fn active(&self, ctx: &HookCtx) -> bool {
        self.params.band.contains(ctx.site.layer, ctx.step)
    }

    fn apply(&mut self, ctx: &HookCtx, x: TensorF) -> Result<TensorF> {
        Ok(text_scale(ctx.site, ctx.step, x, &self.params))
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poison| poison.into_inner())
}

/// Two-pass record/replay. Starts in replay mode; the hub toggles it.
pub struct MasaCtrlOp {
    band: Band,
    source_start: usize,
    full_stream: bool,
    recording: bool,
    cache: Arc<Mutex<KvCache>>,
}

impl MasaCtrlOp {
    pub fn new(band: Band, source_start: usize, full_stream: bool) -> Self {
        Self {
            band,
            source_start,
            full_stream,
            recording: false,
            cache: Arc::default(),
        }
    }

    /// Shared view of the cache, valid after the op is moved into a hub.
    pub fn cache_handle(&self) -> Arc<Mutex<KvCache>> {
        Arc::clone(&self.cache)
    }
}

impl AttnOp for MasaCtrlOp {
    fn name(&self) -> String {
        format!("masactrl(recording={})", self.recording)
    }

    fn kinds(&self) -> &'static [ProjKind] {
        &ProjKind::IMAGE_KV
    }

    fn active(&self, ctx: &HookCtx) -> bool {
        self.band.contains(ctx.site.layer, ctx.step)
    }

    fn apply(&mut self, ctx: &HookCtx, x: TensorF) -> Result<TensorF> {
        let mut cache = lock(&self.cache);
        if self.recording {
            masactrl_record(ctx, x, &mut cache)
        } else {
            masactrl_inject(ctx, x, &cache, &self.band, self.source_start, self.full_stream)
        }
    }

    fn reset(&mut self) {
        lock(&self.cache).clear();
    }

    fn set_record_mode(&mut self, recording: bool) {
        self.recording = recording;
    }
}

/// Observe-only K similarity probe.
pub struct KProbeOp {
    band: Band,
    source_start: usize,
    log: Arc<Mutex<ProbeLog>>,
}

impl KProbeOp {
    pub fn new(band: Band, source_start: usize) -> Self {
        Self {
            band,
            source_start,
            log: Arc::default(),
        }
    }

    pub fn log_handle(&self) -> Arc<Mutex<ProbeLog>> {
        Arc::clone(&self.log)
    }
}

impl AttnOp for KProbeOp {
    fn name(&self) -> String {
        "k_probe".into()
    }

    fn kinds(&self) -> &'static [ProjKind] {
        &[ProjKind::ImgK]
    }

    fn active(&self, ctx: &HookCtx) -> bool {
        self.band.contains(ctx.site.layer, ctx.step)
    }

    fn apply(&mut self, ctx: &HookCtx, x: TensorF) -> Result<TensorF> {
        k_probe(ctx, x, &mut lock(&self.log), self.source_start)
    }

    fn reset(&mut self) {
        lock(&self.log).clear();
    }
}
