// SPDX-License-Identifier: MIT OR Apache-2.0

//! Variant runs and sweeps over a suite.
//!
//! Every case owns its hub and sampler state; the model and the metric
//! providers are shared read-only. Cases run on a dedicated rayon pool and are
//! collected back in suite order, so results do not depend on the worker count.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{MetricSuite, MetricsReport};
use super::suite::{EditCase, Suite};
use crate::edit::{run_edit, EditOptions};
use crate::error::{Error, Result};
use crate::mmdit::{build_model, encode_source, Model, SampleConfig};
use crate::ops::{BandSpec, Half, OpContext, OpSpec};
use crate::router::{routed_edit, CentroidClassifier, EditCategory, RouteTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteMode {
    Oracle,
    Auto,
}

impl FromStr for RouteMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(RouteMode::Oracle),
            "auto" => Ok(RouteMode::Auto),
            other => Err(Error::parse(other, "route mode must be `oracle` or `auto`")),
        }
    }
}

impl fmt::Display for RouteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouteMode::Oracle => "oracle",
            RouteMode::Auto => "auto",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VariantSpec {
    Op(OpSpec),
    Routed(RouteMode),
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantSpec::Op(op) => write!(f, "{op}"),
            VariantSpec::Routed(mode) => write!(f, "router:{mode}"),
        }
    }
}

/// A named row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub spec: VariantSpec,
}

impl Variant {
    pub fn op(name: impl Into<String>, op: OpSpec) -> Self {
        Self {
            name: name.into(),
            spec: VariantSpec::Op(op),
        }
    }

    pub fn routed(mode: RouteMode) -> Self {
        Self {
            name: format!("router_{mode}"),
            spec: VariantSpec::Routed(mode),
        }
    }

    pub fn baseline() -> Self {
        Self::op("baseline", OpSpec::Baseline)
    }
}

/// The sampler inputs a case actually consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consumed {
    pub seed: u64,
    pub source_label: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub category: EditCategory,
    /// Category the router chose, for routed variants.
    pub routed: Option<EditCategory>,
    pub consumed: Consumed,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
    /// Bitwise fingerprint of the final latent.
    pub latent_checksum: Option<u64>,
    /// Hook dispatches over all passes.
    pub dispatches: u64,
    /// In-band op applications.
    pub applied: u64,
    pub seconds: Option<f64>,
}

/// One variant over a whole suite. `mean` is `None` whenever any case failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub spec: String,
    pub cases: Vec<CaseResult>,
    pub mean: Option<MetricsReport>,
    pub dispatches: u64,
    pub applied: u64,
    pub seconds_per_case: Option<f64>,
}

impl VariantResult {
    fn aggregate(variant: &Variant, cases: Vec<CaseResult>) -> Self {
        let metrics: Option<Vec<MetricsReport>> = cases.iter().map(|c| c.metrics).collect();
        let seconds: Option<Vec<f64>> = cases.iter().map(|c| c.seconds).collect();
        Self {
            name: variant.name.clone(),
            spec: variant.spec.to_string(),
            mean: metrics.and_then(|m| MetricsReport::mean(&m)),
            dispatches: cases.iter().map(|c| c.dispatches).sum(),
            applied: cases.iter().map(|c| c.applied).sum(),
            seconds_per_case: seconds
                .filter(|s| !s.is_empty())
                .map(|s| s.iter().sum::<f64>() / s.len() as f64),
            cases,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.cases.iter().all(|c| c.error.is_none())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| c.error.is_some())
    }

    /// Fraction of routed cases whose chosen category equals the label.
    pub fn routing_accuracy(&self) -> Option<f64> {
        let routed: Vec<_> = self.cases.iter().filter_map(|c| c.routed.map(|r| r == c.category)).collect();
        if routed.is_empty() {
            return None;
        }
        Some(routed.iter().filter(|ok| **ok).count() as f64 / routed.len() as f64)
    }

    /// `(case_id, consumed)` in suite order.
    pub fn consumed_log(&self) -> Vec<(&str, &Consumed)> {
        self.cases.iter().map(|c| (c.case_id.as_str(), &c.consumed)).collect()
    }
}

/// Model, sampler settings, router and metric providers shared by all runs.
pub struct Harness {
    model: Model,
    sample: SampleConfig,
    table: RouteTable,
    classifier: CentroidClassifier,
    metrics: MetricSuite,
    workers: usize,
    timing: bool,
}

impl fmt::Debug for Harness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Harness")
            .field("model", &self.model)
            .field("workers", &self.workers)
            .finish_non_exhaustive()
    }
}

impl Harness {
    /// Shipped routing table and anchors, toy metric providers, one worker.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        Ok(Self {
            metrics: MetricSuite::toy(&cfg.model)?,
            model: build_model(cfg.model)?,
            sample: cfg.sample,
            table: RouteTable::default(),
            classifier: CentroidClassifier::default_toy()?,
            workers: 1,
            timing: false,
        })
    }

    pub fn with_router(mut self, table: RouteTable, classifier: CentroidClassifier) -> Self {
        self.table = table;
        self.classifier = classifier;
        self
    }

    pub fn with_metrics(mut self, metrics: MetricSuite) -> Self {
        self.metrics = metrics;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    /// Record wall-clock per case. Off by default so reports are reproducible.
    pub fn with_timing(mut self, timing: bool) -> Self {
        self.timing = timing;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn sample_config(&self) -> &SampleConfig {
        &self.sample
    }

    pub fn table(&self) -> &RouteTable {
        &self.table
    }

    pub fn classifier(&self) -> &CentroidClassifier {
        &self.classifier
    }

    pub fn metrics(&self) -> &MetricSuite {
        &self.metrics
    }

    pub fn op_context(&self) -> OpContext {
        OpContext::new(self.model.config(), self.sample.steps)
    }

    /// Provider identifiers for report headers.
    pub fn provider_ids(&self) -> Vec<String> {
        let [clip, text, dino] = self.metrics.provider_ids();
        vec![
            format!("clip_image={clip}"),
            format!("clip_text={text}"),
            format!("dino={dino}"),
            format!("router_text={}", self.classifier.embedder_id()),
        ]
    }

    /// Runs one case. Failures are captured in the result, not returned.
    pub fn run_case(&self, variant: &Variant, case: &EditCase) -> CaseResult {
        let started = Instant::now();
        let consumed = Consumed {
            seed: case.seed,
            source_label: case.source_label.clone(),
            prompt: case.instruction.clone(),
        };
        let mut out = CaseResult {
            case_id: case.id.clone(),
            category: case.category,
            routed: None,
            consumed,
            metrics: None,
            error: None,
            latent_checksum: None,
            dispatches: 0,
            applied: 0,
            seconds: None,
        };
        let cfg = self.model.config();
        let source = encode_source(&case.source_label, cfg, case.seed);
        let sc = SampleConfig {
            seed: case.seed,
            ..self.sample.clone()
        };
        let run = match &variant.spec {
            VariantSpec::Op(op) => run_edit(&self.model, &source, &case.instruction, op, &sc, EditOptions::default())
                .map(|r| (r.total_firings(), r.total_applied(), r.latent, None)),
            VariantSpec::Routed(mode) => {
                let oracle = (*mode == RouteMode::Oracle).then_some(case.category);
                routed_edit(&self.model, &source, &case.instruction, &self.table, &self.classifier, oracle, &sc)
                    .map(|r| (r.firings, r.applied, r.latent, Some(r.category)))
            }
        };
        let scored = run.and_then(|(dispatches, applied, latent, routed)| {
            out.dispatches = dispatches;
            out.applied = applied;
            out.routed = routed;
            out.latent_checksum = Some(latent.bit_checksum());
            self.metrics
                .evaluate(&latent, &source.tokens, &case.instruction, case.caption.as_deref())
        });
        match scored {
            Ok(m) => out.metrics = Some(m),
            Err(e) => out.error = Some(e.to_string()),
        }
        if self.timing {
            out.seconds = Some(started.elapsed().as_secs_f64());
        }
        out
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Harness(format!("cannot start worker pool: {e}")))
    }

    /// Runs every case of `suite` under `variant`.
    pub fn run_variant(&self, variant: &Variant, suite: &Suite) -> Result<VariantResult> {
        if let VariantSpec::Op(op) = &variant.spec {
            op.validate()?;
        }
        let cases = self
            .pool()?
            .install(|| suite.cases.par_iter().map(|c| self.run_case(variant, c)).collect());
        Ok(VariantResult::aggregate(variant, cases))
    }

    /// Baseline first, then one row per grid point.
    pub fn sweep(&self, axis: Option<SweepAxis>, grid: &[Variant], suite: &Suite) -> Result<SweepResult> {
        if grid.is_empty() {
            return Err(Error::Harness("sweep grid is empty".into()));
        }
        let baseline = self.run_variant(&Variant::baseline(), suite)?;
        let base = baseline.mean.map(|m| m.composite);
        let mut rows = vec![SweepRow {
            result: baseline,
            delta_vs_baseline: None,
        }];
        for v in grid {
            let result = self.run_variant(v, suite)?;
            let delta = match (base, result.mean) {
                (Some(b), Some(m)) if b != 0.0 => Some((m.composite - b) / b.abs()),
                _ => None,
            };
            rows.push(SweepRow {
                result,
                delta_vs_baseline: delta,
            });
        }
        Ok(SweepResult { axis, rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    Alpha,
    Layers,
    Steps,
    TextScale,
    KvScale,
    Main,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Alpha,
        SweepAxis::Layers,
        SweepAxis::Steps,
        SweepAxis::TextScale,
        SweepAxis::KvScale,
        SweepAxis::Main,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Layers => "layers",
            SweepAxis::Steps => "steps",
            SweepAxis::TextScale => "textscale",
            SweepAxis::KvScale => "kvscale",
            SweepAxis::Main => "main",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => SweepAxis::Alpha,
            "layers" | "layer_band" => SweepAxis::Layers,
            "steps" | "step_band" => SweepAxis::Steps,
            "textscale" | "text_scale" => SweepAxis::TextScale,
            "kvscale" | "kv_scale" => SweepAxis::KvScale,
            "main" => SweepAxis::Main,
            other => return Err(Error::parse(other, "unknown sweep axis")),
        })
    }
}

/// Mid-depth band used by the shipped routes and the single best op.
pub const MID_BAND: (f64, f64) = (0.5, 0.75);
/// Neutral prompt for the two-pass record run.
pub const NEUTRAL_PROMPT: &str = "a photo";

fn band_label(band: &BandSpec, ctx: &OpContext) -> String {
    match band.resolve(ctx) {
        Ok(b) => {
            let mut s = format!("L{}-{}", b.layer_lo, b.layer_hi);
            if (b.step_lo, b.step_hi) != (0, ctx.steps) {
                s += &format!("_S{}-{}", b.step_lo, b.step_hi);
            }
            s
        }
        Err(_) => "invalid".into(),
    }
}

fn kv(alpha: f32, band: BandSpec, ctx: &OpContext) -> Variant {
    Variant::op(format!("kvinject_a{alpha}_{}", band_label(&band, ctx)), OpSpec::kv_inject(alpha, band))
}

fn kv_scale(half: Half, factor: f32) -> Variant {
    let h = match half {
        Half::Source => "src",
        Half::Noise => "noi",
    };
    Variant::op(
        format!("kvscale_{h}_{factor:.1}"),
        OpSpec::SimpleKvScale {
            half,
            factor,
            band: BandSpec::ALL,
        },
    )
}

fn text_scale(factor: f32) -> Variant {
    Variant::op(
        format!("textscale_{factor:.1}"),
        OpSpec::TextScale {
            factor,
            band: BandSpec::ALL,
        },
    )
}

/// Default grid for each axis, rows in table order. The baseline row is added
/// by [`Harness::sweep`].
pub fn default_grid(axis: SweepAxis, ctx: &OpContext) -> Vec<Variant> {
    let (lo, hi) = MID_BAND;
    let mid = BandSpec::frac(lo, hi);
    match axis {
        SweepAxis::Alpha => [0.3f32, 0.5, 0.7]
            .iter()
            .flat_map(|&a| [kv(a, BandSpec::frac(0.25, 0.5), ctx), kv(a, mid, ctx)])
            .collect(),
        SweepAxis::Layers => [(0.0, 0.25), (0.5, 0.75), (0.75, 1.0)]
            .iter()
            .map(|&(l, h)| kv(0.3, BandSpec::frac(l, h), ctx))
            .collect(),
        SweepAxis::Steps => {
            let s = ctx.steps;
            let q = s / 4;
            let mut bands: Vec<(usize, usize)> = (0..4).map(|i| (i * q, if i == 3 { s } else { (i + 1) * q })).collect();
            bands.push((0, s));
            bands
                .into_iter()
                .map(|(a, b)| {
                    let band = mid.with_steps(a, b);
                    Variant::op(
                        format!("kvinject_a0.3_{}_S{a}-{b}", band_label(&mid, ctx)),
                        OpSpec::kv_inject(0.3, band),
                    )
                })
                .collect()
        }
        SweepAxis::TextScale => [0.5, 1.5, 3.0].into_iter().map(text_scale).collect(),
        SweepAxis::KvScale => vec![
            kv_scale(Half::Source, 0.0),
            kv_scale(Half::Source, 0.5),
            kv_scale(Half::Source, 2.0),
            kv_scale(Half::Noise, 0.5),
            kv_scale(Half::Noise, 2.0),
        ],
        SweepAxis::Main => vec![
            kv_scale(Half::Source, 2.0),
            text_scale(3.0),
            Variant::op(
                "masactrl",
                OpSpec::MasaCtrl {
                    band: BandSpec::ALL,
                    neutral_prompt: NEUTRAL_PROMPT.into(),
                    full_stream: false,
                },
            ),
            kv(0.3, mid, ctx),
            Variant::routed(RouteMode::Auto),
            Variant::routed(RouteMode::Oracle),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub result: VariantResult,
    /// Relative composite change against the baseline row.
    pub delta_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Option<SweepAxis>,
    /// Baseline first.
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn baseline(&self) -> &VariantResult {
        &self.rows[0].result
    }

    /// Non-baseline row with the highest mean composite; first wins ties.
    pub fn best(&self) -> Option<&VariantResult> {
        let mut best: Option<&VariantResult> = None;
        for r in self.rows.iter().skip(1).map(|r| &r.result) {
            let Some(m) = r.mean else { continue };
            if best.is_none_or(|b| m.composite > b.mean.map_or(f64::NEG_INFINITY, |x| x.composite)) {
                best = Some(r);
            }
        }
        best
    }

    /// Checks that every variant consumed exactly the baseline's
    /// `(seed, source, prompt)` triple for every case.
    pub fn paired_audit(&self) -> Result<()> {
        let reference = self.baseline().consumed_log();
        for row in &self.rows[1..] {
            let log = row.result.consumed_log();
            if log.len() != reference.len() {
                return Err(Error::Harness(format!(
                    "variant `{}` ran {} cases, baseline ran {}",
                    row.result.name,
                    log.len(),
                    reference.len()
                )));
            }
            if let Some(((id, _), _)) = log.iter().zip(&reference).find(|(a, b)| a != b) {
                return Err(Error::Harness(format!(
                    "variant `{}` consumed different inputs for case `{id}`",
                    row.result.name
                )));
            }
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.result.is_complete())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::suite::generate_suite;

    fn small() -> RunConfig {
        RunConfig::parse("num_layers = 4\nsteps = 4").unwrap()
    }

    #[test]
    fn grids_have_table_shapes() {
        let ctx = OpContext::new(&Default::default(), 28);
        let sizes: Vec<usize> = SweepAxis::ALL.iter().map(|a| default_grid(*a, &ctx).len()).collect();
        assert_eq!(sizes, [6, 3, 5, 3, 5, 6]);
        let names: Vec<String> = default_grid(SweepAxis::Alpha, &ctx).into_iter().map(|v| v.name).collect();
        assert_eq!(names[0], "kvinject_a0.3_L3-6");
        assert_eq!(names[1], "kvinject_a0.3_L6-9");
        let steps: Vec<String> = default_grid(SweepAxis::Steps, &ctx).into_iter().map(|v| v.name).collect();
        assert_eq!(steps[0], "kvinject_a0.3_L6-9_S0-7");
        assert_eq!(steps[4], "kvinject_a0.3_L6-9_S0-28");
        for a in SweepAxis::ALL {
            assert_eq!(a.as_str().parse::<SweepAxis>().unwrap(), a);
        }
    }

    #[test]
    fn empty_grid_is_rejected() {
        let h = Harness::new(small()).unwrap();
        assert!(h.sweep(None, &[], &generate_suite(1, 0)).is_err());
    }

    #[test]
    fn baseline_is_deterministic_and_alpha_zero_matches() {
        let h = Harness::new(small()).unwrap();
        let suite = generate_suite(1, 5);
        let a = h.run_variant(&Variant::baseline(), &suite).unwrap();
        assert_eq!(a, h.run_variant(&Variant::baseline(), &suite).unwrap());
        assert!(a.is_complete() && a.mean.is_some());
        let z = h
            .run_variant(&Variant::op("a0", OpSpec::kv_inject(0.0, BandSpec::ALL)), &suite)
            .unwrap();
        let sums = |r: &VariantResult| r.cases.iter().map(|c| c.latent_checksum).collect::<Vec<_>>();
        assert_eq!(sums(&a), sums(&z));
    }

    #[test]
    fn failed_case_blocks_the_mean() {
        let h = Harness::new(small()).unwrap();
        let mut suite = generate_suite(1, 0);
        // Layer 9 does not exist in a 4-layer model, so the band fails to resolve.
        let bad = Variant::op("bad", OpSpec::kv_inject(0.3, BandSpec::layers(2, 9)));
        let r = h.run_variant(&bad, &suite).unwrap();
        assert!(!r.is_complete());
        assert_eq!(r.mean, None);
        assert_eq!(r.failures().count(), 6);
        suite.cases.clear();
        assert_eq!(h.run_variant(&Variant::baseline(), &suite).unwrap().mean, None);
    }

    #[test]
    fn workers_do_not_change_results() {
        let suite = generate_suite(1, 9);
        let v = Variant::op("kv", OpSpec::kv_inject(0.5, BandSpec::ALL));
        let one = Harness::new(small()).unwrap().run_variant(&v, &suite).unwrap();
        let four = Harness::new(small()).unwrap().with_workers(4).run_variant(&v, &suite).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn sweep_rows_and_audit() {
        let h = Harness::new(small()).unwrap();
        let suite = generate_suite(1, 2);
        let grid = [Variant::routed(RouteMode::Oracle), Variant::routed(RouteMode::Auto)];
        let s = h.sweep(None, &grid, &suite).unwrap();
        assert_eq!(s.rows.len(), 3);
        assert_eq!(s.baseline().name, "baseline");
        assert!(s.rows[0].delta_vs_baseline.is_none() && s.rows[1].delta_vs_baseline.is_some());
        s.paired_audit().unwrap();
        assert_eq!(s.rows[1].result.routing_accuracy(), Some(1.0));
        let mut tampered = s.clone();
        tampered.rows[2].result.cases[3].consumed.seed ^= 1;
        assert!(tampered.paired_audit().is_err());
    }

    #[test]
    fn timing_is_opt_in() {
        let suite = generate_suite(1, 0);
        let h = Harness::new(small()).unwrap();
        assert_eq!(h.run_variant(&Variant::baseline(), &suite).unwrap().seconds_per_case, None);
        let h = h.with_timing(true);
        assert!(h.run_variant(&Variant::baseline(), &suite).unwrap().seconds_per_case.is_some());
    }
}
